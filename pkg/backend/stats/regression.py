"""
Cohort-level regressions and summaries.
"""
from dataclasses import dataclass
import logging

import numpy as np
from scipy import stats

from geometry.exceptions import InsufficientDataError, InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LambdaRecord:
    subject_id: str
    lambda_: float
    ed_volume: float
    es_momentum_norm: float = None


@dataclass(frozen=True)
class LambdaRegression:
    slope: float
    intercept: float
    r_squared: float
    pearson_rho: float = None
    pearson_p: float = None
    n_records: int = 0

    def predict(self, reference_volume, ed_volume):
        """lambda predicted for a subject of volume ``ed_volume``."""
        return float(np.exp(self.intercept + self.slope * np.log(reference_volume / ed_volume)))


def lambda_volume_regression(records, reference_volume):
    """
    OLS of log(lambda) on log(V_ref / V_ED). When every record carries the RKHS
    norm of its ES momenta, also the Pearson correlation of that norm with V_ED.
    """
    records = list(records)
    if len(records) < 3:
        raise InsufficientDataError("lambda regression needs at least three subjects",
                                    context={"records": len(records)})
    if not reference_volume > 0:
        raise InvalidArgumentError("reference volume must be positive", context={"volume": reference_volume})
    lambdas = np.array([record.lambda_ for record in records], dtype=np.float64)
    volumes = np.array([record.ed_volume for record in records], dtype=np.float64)
    if np.any(lambdas <= 0) or np.any(volumes <= 0):
        raise InvalidArgumentError("lambdas and volumes must be positive")

    x = np.log(reference_volume / volumes)
    y = np.log(lambdas)
    if np.ptp(x) == 0:
        raise InsufficientDataError("ED volumes do not vary; the slope is undefined")
    fit = stats.linregress(x, y)
    residuals = y - (fit.intercept + fit.slope * x)
    total = float(((y - y.mean()) ** 2).sum())
    r_squared = 1.0 - float((residuals ** 2).sum()) / total if total > 0 else 1.0

    rho = rho_p = None
    norms = [record.es_momentum_norm for record in records]
    if all(norm is not None for norm in norms) and np.ptp(norms) > 0:
        rho, rho_p = (float(value) for value in stats.pearsonr(norms, volumes))

    result = LambdaRegression(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=r_squared,
        pearson_rho=rho,
        pearson_p=rho_p,
        n_records=len(records),
    )
    logger.info("lambda regression over %d subjects: slope %.4g, R^2 %.4g", len(records), result.slope,
                result.r_squared)
    return result


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int

    def __str__(self):
        return f"{self.mean:.2f} ± {self.std:.2f}"


def cohort_summary(values):
    """Sample mean and standard deviation (n - 1 denominator)."""
    values = np.asarray(list(values), dtype=np.float64)
    if len(values) < 2:
        raise InsufficientDataError("a summary needs at least two values", context={"values": len(values)})
    return Summary(mean=float(values.mean()), std=float(values.std(ddof=1)), n=len(values))
