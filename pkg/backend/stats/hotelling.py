"""
Two-sample Hotelling T^2 test with a pooled covariance.
"""
from dataclasses import dataclass
from enum import Enum
import logging

import numpy as np
from scipy import stats
from statsmodels.stats.multitest import multipletests

from geometry.exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

# Pooled covariances worse conditioned than this get a ridge of RIDGE * trace / dim.
MAX_CONDITION = 1e12
RIDGE = 1e-8


class HotellingStatus(str, Enum):
    OK = "ok"
    REGULARIZED = "regularized"
    UNTESTABLE = "untestable"


@dataclass(frozen=True)
class HotellingResult:
    t2: float
    f: float
    p: float
    df1: int
    df2: int
    status: HotellingStatus = HotellingStatus.OK

    @property
    def testable(self):
        return self.status != HotellingStatus.UNTESTABLE


def _as_samples(values, name):
    samples = np.asarray(values, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples.reshape(-1, 1)
    if samples.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a (n, dim) matrix", context={"shape": samples.shape})
    if not np.all(np.isfinite(samples)):
        raise InvalidArgumentError(f"{name} contains missing or non-finite values")
    return samples


def _untestable(dim, df2):
    return HotellingResult(t2=float("nan"), f=float("nan"), p=float("nan"), df1=dim, df2=df2,
                           status=HotellingStatus.UNTESTABLE)


def pooled_covariance(group_a, group_b):
    n_a, n_b = len(group_a), len(group_b)
    scatter_a = (group_a - group_a.mean(axis=0)).T @ (group_a - group_a.mean(axis=0))
    scatter_b = (group_b - group_b.mean(axis=0)).T @ (group_b - group_b.mean(axis=0))
    return (scatter_a + scatter_b) / (n_a + n_b - 2)


def hotelling_two_sample(group_a, group_b):
    """
    Classical two-sample T^2 = n_a n_b / (n_a + n_b) d^T S^-1 d, its F transform
    and the upper-tail p-value of F(dim, n_a + n_b - dim - 1).

    A near-singular pooled covariance is ridge-regularized and the result marked
    ``regularized``; tests that remain undefined come back ``untestable`` with NaN
    statistics, never as significant.
    """
    group_a = _as_samples(group_a, "group_a")
    group_b = _as_samples(group_b, "group_b")
    if group_a.shape[1] != group_b.shape[1]:
        raise InvalidArgumentError(
            "groups differ in dimension", context={"group_a": group_a.shape[1], "group_b": group_b.shape[1]}
        )
    n_a, n_b = len(group_a), len(group_b)
    dim = group_a.shape[1]
    df2 = n_a + n_b - dim - 1
    if n_a < 1 or n_b < 1 or df2 < 1:
        logger.debug("hotelling: %d + %d samples cannot support dimension %d", n_a, n_b, dim)
        return _untestable(dim, df2)

    covariance = pooled_covariance(group_a, group_b)
    trace = float(np.trace(covariance))
    if not trace > 0:
        return _untestable(dim, df2)
    status = HotellingStatus.OK
    if np.linalg.cond(covariance) > MAX_CONDITION:
        covariance = covariance + RIDGE * trace / dim * np.eye(dim)
        status = HotellingStatus.REGULARIZED
        if np.linalg.cond(covariance) > MAX_CONDITION:
            return _untestable(dim, df2)

    difference = group_a.mean(axis=0) - group_b.mean(axis=0)
    t2 = float(n_a * n_b / (n_a + n_b) * difference @ np.linalg.solve(covariance, difference))
    t2 = max(t2, 0.0)
    f = t2 * df2 / (dim * (n_a + n_b - 2))
    p = float(stats.f.sf(f, dim, df2))
    return HotellingResult(t2=t2, f=f, p=p, df1=dim, df2=df2, status=status)


def bonferroni(p_values, alpha=0.05):
    """
    Bonferroni-adjusted p-values min(1, p m), m being the number of testable
    entries; untestable (NaN) entries stay NaN.
    """
    p_values = np.asarray(p_values, dtype=np.float64)
    adjusted = np.full(p_values.shape, np.nan)
    testable = np.isfinite(p_values)
    if testable.any():
        adjusted[testable] = multipletests(p_values[testable], alpha=alpha, method="bonferroni")[1]
    return adjusted
