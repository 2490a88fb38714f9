import csv
import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase, tag
from scipy import stats as scipy_stats

from geometry.exceptions import InsufficientDataError, InvalidArgumentError
from stats.groupwise import FORCE, MOMENTUM, SubjectDescriptor, block_index, groupwise_tests
from stats.hotelling import HotellingStatus, bonferroni, hotelling_two_sample
from stats.regression import LambdaRecord, cohort_summary, lambda_volume_regression
from stats.reports import (
    TRANSPORT_FIELDS,
    comparison_summaries,
    write_block_tests,
    write_lambda_records,
    write_significance_map,
    write_transport_results,
)
from transport.scaling import ScaledTransportResult


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


### Equivalence classes ###
##  Hotelling two-sample test
#       well-conditioned pooled covariance      (ok)
#       rank-deficient pooled covariance        (regularized)
#       zero covariance, too few samples        (untestable)
#       groups of different dimension           (invalid)

class HotellingTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)

    def test_identical_groups(self):
        samples = self.rng.normal(size=(10, 3))
        result = hotelling_two_sample(samples, samples)
        self.assertEqual(result.t2, 0.0)
        self.assertEqual(result.p, 1.0)
        self.assertEqual(result.status, HotellingStatus.OK)

    def test_one_dimension_is_squared_t(self):
        a = self.rng.normal(size=14)
        b = self.rng.normal(loc=0.4, size=11)
        t = scipy_stats.ttest_ind(a, b).statistic
        result = hotelling_two_sample(a, b)
        self.assertAlmostEqual(result.t2 / t ** 2, 1.0, places=10)
        self.assertAlmostEqual(result.p, scipy_stats.ttest_ind(a, b).pvalue, places=10)

    def test_affine_invariance(self):
        a = self.rng.normal(size=(9, 3))
        b = self.rng.normal(loc=0.5, size=(12, 3))
        matrix = self.rng.normal(size=(3, 3)) + 3 * np.eye(3)
        offset = self.rng.normal(size=3)
        original = hotelling_two_sample(a, b).t2
        mapped = hotelling_two_sample(a @ matrix.T + offset, b @ matrix.T + offset).t2
        self.assertLessEqual(abs(mapped - original) / original, 1e-8)

    def test_f_transform(self):
        a = self.rng.normal(size=(8, 3))
        b = self.rng.normal(size=(7, 3))
        result = hotelling_two_sample(a, b)
        self.assertEqual((result.df1, result.df2), (3, 11))
        self.assertAlmostEqual(result.f, result.t2 * 11 / (3 * 13), places=12)

    def test_rank_deficient_covariance_is_regularized(self):
        a = self.rng.normal(size=(10, 3))
        b = self.rng.normal(size=(10, 3))
        a[:, 2] = 0.0
        b[:, 2] = 0.0
        result = hotelling_two_sample(a, b)
        self.assertEqual(result.status, HotellingStatus.REGULARIZED)
        self.assertTrue(math.isfinite(result.t2))

    def test_untestable_blocks(self):
        too_few = hotelling_two_sample(self.rng.normal(size=(2, 3)), self.rng.normal(size=(2, 3)))
        self.assertEqual(too_few.status, HotellingStatus.UNTESTABLE)
        self.assertTrue(math.isnan(too_few.p))
        constant = hotelling_two_sample(np.zeros((5, 3)), np.zeros((5, 3)))
        self.assertEqual(constant.status, HotellingStatus.UNTESTABLE)

    def test_dimension_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            hotelling_two_sample(np.zeros((4, 3)), np.zeros((4, 2)))

    def test_bonferroni(self):
        raw = [0.01, 0.2, float("nan"), 0.5]
        adjusted = bonferroni(raw)
        np.testing.assert_allclose(adjusted[[0, 1, 3]], [0.03, 0.6, 1.0])
        self.assertTrue(math.isnan(adjusted[2]))
        self.assertTrue(np.all(adjusted[[0, 1, 3]] >= np.array(raw)[[0, 1, 3]]))

    @tag("slow")
    def test_type_one_error_is_calibrated(self):
        rng = np.random.default_rng(2024)
        rejections = 0
        replicates = 10000
        for _ in range(replicates):
            result = hotelling_two_sample(rng.normal(size=(30, 3)), rng.normal(size=(30, 3)))
            rejections += result.p < 0.05
        self.assertTrue(0.04 <= rejections / replicates <= 0.06)


def descriptors_for(group, blocks, start=0):
    control_points = np.arange(blocks.shape[2] * 3, dtype=float).reshape(-1, 3)
    return [
        SubjectDescriptor(f"{group}-{start + i:02d}", group, control_points, subject)
        for i, subject in enumerate(blocks)
    ]


class GroupwiseTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.n_cps, self.n_steps = 6, 2
        self.control = self.rng.normal(size=(12, 1 + self.n_steps, self.n_cps, 3))

    def test_block_layout(self):
        index = block_index(self.n_cps, self.n_steps)
        self.assertEqual(len(index), self.n_cps * (1 + self.n_steps))
        self.assertEqual(index[0], (MOMENTUM, 0, None, 0))
        self.assertEqual(index[1], (FORCE, 0, 0, 1))
        self.assertEqual(index[3], (MOMENTUM, 1, None, 0))

    def test_identical_groups_flag_nothing(self):
        descriptors = descriptors_for("Control", self.control) + descriptors_for("ASD", self.control)
        reports = groupwise_tests(descriptors)
        self.assertEqual(len(reports), self.n_cps * (1 + self.n_steps))
        self.assertFalse(any(report.significant for report in reports))

    def test_planted_blocks_are_recovered(self):
        disease = self.control.copy()
        planted = {1, 4}
        for k in planted:
            disease[:, 0, k] += [4.0, -2.0, 1.0] + 0.1 * self.rng.normal(size=(12, 3))
        reports = groupwise_tests(descriptors_for("Control", self.control) + descriptors_for("ToF", disease))
        flagged = {(report.block_type, report.control_point) for report in reports if report.significant}
        self.assertEqual(flagged, {(MOMENTUM, k) for k in planted})
        hit = next(report for report in reports if report.significant)
        np.testing.assert_allclose(hit.mean_difference, disease[:, 0, hit.control_point].mean(axis=0)
                                   - self.control[:, 0, hit.control_point].mean(axis=0))
        self.assertEqual(hit.comparison, "ToF_vs_Control")

    @tag("slow")
    def test_planted_signal_over_replicates(self):
        planted = {0, 3, 5}
        false_positives = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            control = rng.normal(size=(12, 3, 6, 3))
            disease = rng.normal(size=(12, 3, 6, 3))
            for k in planted:
                disease[:, 0, k] += [3.0, 0.0, -3.0]
            reports = groupwise_tests(descriptors_for("Control", control) + descriptors_for("PHT", disease))
            flagged = {report.control_point for report in reports
                       if report.significant and report.block_type == MOMENTUM}
            self.assertTrue(planted <= flagged)
            false_positives += sum(
                report.significant for report in reports
                if report.block_type == FORCE or report.control_point not in planted
            )
        self.assertLessEqual(false_positives, 4)

    def test_one_comparison_per_disease_group(self):
        descriptors = (descriptors_for("Control", self.control) + descriptors_for("ASD", self.control)
                       + descriptors_for("PHT", self.control))
        comparisons = [report.comparison for report in groupwise_tests(descriptors)]
        self.assertEqual(sorted(set(comparisons)), ["ASD_vs_Control", "PHT_vs_Control"])
        self.assertEqual(comparisons[0], "ASD_vs_Control")

    def test_control_points_must_match(self):
        descriptors = descriptors_for("Control", self.control)
        other = SubjectDescriptor("x", "ASD", descriptors[0].control_points + 1.0, self.control[0])
        with self.assertRaises(InvalidArgumentError) as raised:
            groupwise_tests(descriptors + [other])
        self.assertEqual(raised.exception.code, "control_points_mismatch")

    def test_control_group_required(self):
        with self.assertRaises(InsufficientDataError):
            groupwise_tests(descriptors_for("ASD", self.control))

    def test_from_arrays(self):
        descriptor = SubjectDescriptor.from_arrays("s", "Control", np.zeros((2, 3)), np.ones((2, 3)),
                                                   np.full((4, 2, 3), 2.0))
        self.assertEqual(descriptor.blocks.shape, (5, 2, 3))
        self.assertEqual(descriptor.n_steps, 4)
        np.testing.assert_array_equal(descriptor.blocks[0], np.ones((2, 3)))


class RegressionTests(SimpleTestCase):
    def setUp(self):
        self.volumes = np.array([80.0, 110.0, 150.0, 200.0, 260.0])
        self.reference = 140.0

    def records(self, lambdas, norms=None):
        norms = norms if norms is not None else [None] * len(lambdas)
        return [LambdaRecord(f"s{i}", lam, volume, norm)
                for i, (lam, volume, norm) in enumerate(zip(lambdas, self.volumes, norms))]

    def test_exact_power_law(self):
        beta = 0.7
        result = lambda_volume_regression(self.records((self.reference / self.volumes) ** beta), self.reference)
        self.assertAlmostEqual(result.slope, beta, places=10)
        self.assertAlmostEqual(result.intercept, 0.0, places=10)
        self.assertAlmostEqual(result.r_squared, 1.0, places=10)
        self.assertAlmostEqual(result.predict(self.reference, 100.0), 1.4 ** beta, places=10)

    def test_constant_lambda(self):
        result = lambda_volume_regression(self.records(np.ones(5)), self.reference)
        self.assertEqual(result.slope, 0.0)

    def test_residuals_are_orthogonal(self):
        lambdas = np.array([1.3, 1.1, 0.95, 0.9, 0.7])
        result = lambda_volume_regression(self.records(lambdas), self.reference)
        x = np.log(self.reference / self.volumes)
        residuals = np.log(lambdas) - (result.intercept + result.slope * x)
        self.assertAlmostEqual(residuals.sum(), 0.0, places=10)
        self.assertAlmostEqual(residuals @ x, 0.0, places=10)

    def test_pearson_against_volume(self):
        norms = [1.0, 1.5, 2.2, 2.9, 3.1]
        result = lambda_volume_regression(self.records(np.ones(5), norms), self.reference)
        self.assertAlmostEqual(result.pearson_rho, scipy_stats.pearsonr(norms, self.volumes)[0], places=12)
        self.assertIsNone(lambda_volume_regression(self.records(np.ones(5)), self.reference).pearson_rho)

    def test_insufficient_or_invalid_records(self):
        with self.assertRaises(InsufficientDataError):
            lambda_volume_regression(self.records([1.0, 1.0]), self.reference)
        with self.assertRaises(InvalidArgumentError):
            lambda_volume_regression(self.records([1.0, -1.0, 1.0]), self.reference)

    def test_cohort_summary(self):
        self.assertEqual(cohort_summary([0.42, 0.42, 0.42]).std, 0.0)
        summary = cohort_summary([0.3, 0.5])
        self.assertAlmostEqual(summary.mean, 0.4, places=12)
        self.assertAlmostEqual(summary.std, math.sqrt(0.02), places=12)
        self.assertEqual(str(summary), "0.40 ± 0.14")
        with self.assertRaises(InsufficientDataError):
            cohort_summary([0.3])


class ReportTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        rng = np.random.default_rng(8)
        control = rng.normal(size=(6, 3, 4, 3))
        disease = control.copy()
        disease[:, 0, 2] += 4.0 + 0.1 * rng.normal(size=(6, 3))
        self.control_points = descriptors_for("Control", control)[0].control_points
        self.reports = groupwise_tests(descriptors_for("Control", control) + descriptors_for("ASD", disease))

    def test_block_tests_csv(self):
        path = write_block_tests(os.path.join(self.tmp.name, "hotelling.csv"), self.reports)
        rows = read_csv(path)
        self.assertEqual(len(rows), 4 * 3)
        self.assertEqual(list(rows[0])[:8], ["comparison", "block_type", "control_point", "time_step", "t2",
                                             "p_raw", "p_adj", "significant"])
        self.assertEqual(rows[0]["time_step"], "")
        self.assertEqual(rows[1]["time_step"], "0")
        self.assertEqual([row["significant"] for row in rows].count("true"), 1)
        self.assertEqual(rows[0]["status"], "ok")

    def test_significance_map(self):
        path = write_significance_map(os.path.join(self.tmp.name, "map.csv"), self.reports, self.control_points)
        rows = read_csv(path)
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[2]["significant"], "true")
        self.assertEqual(float(rows[2]["x"]), self.control_points[2, 0])

    def test_lambda_records(self):
        records = [LambdaRecord("b", 1.2, 90.0), LambdaRecord("a", 0.8, 160.0, 2.5)]
        rows = read_csv(write_lambda_records(os.path.join(self.tmp.name, "lambda.csv"), records, 120.0))
        self.assertEqual([row["subject_id"] for row in rows], ["a", "b"])
        self.assertEqual(rows[1]["es_momentum_norm"], "")
        self.assertAlmostEqual(float(rows[0]["log_volume_ratio"]), math.log(0.75), places=9)

    def test_family_size_counts_testable_blocks(self):
        self.assertEqual(comparison_summaries(self.reports), {
            "ASD_vs_Control": {"blocks": 12, "bonferroni_family": 12, "untestable": 0, "significant": 1},
        })
        rng = np.random.default_rng(9)
        control = rng.normal(size=(6, 3, 4, 3))
        disease = rng.normal(size=(6, 3, 4, 3))
        control[:, 1, 3] = 0.0
        disease[:, 1, 3] = 0.0
        reports = groupwise_tests(descriptors_for("Control", control) + descriptors_for("ASD", disease))
        summary = comparison_summaries(reports)["ASD_vs_Control"]
        self.assertEqual(summary["bonferroni_family"], 11)
        self.assertEqual(summary["untestable"], 1)
        testable = [report for report in reports if report.result.testable]
        self.assertAlmostEqual(testable[0].p_adj, min(1.0, 11 * testable[0].p_raw), places=12)

    def test_transport_results(self):
        def result(subject_id, lambda_, norm_out):
            return ScaledTransportResult(subject_id, lambda_, [0, 1], [], [], np.zeros((1, 3)), 0.4, 0.401, 0.3,
                                         2.0, norm_out)

        results = {"s2": result("s2", 1.5, 2.02), "s1": result("s1", 0.75, 2.0)}
        path = write_transport_results(os.path.join(self.tmp.name, "transport.csv"), results)
        rows = read_csv(path)
        self.assertEqual(list(rows[0]), TRANSPORT_FIELDS)
        self.assertEqual([row["subject_id"] for row in rows], ["s1", "s2"])
        self.assertEqual(float(rows[0]["lambda"]), 0.75)
        self.assertEqual(float(rows[0]["isometry_defect"]), 0.0)
        self.assertAlmostEqual(float(rows[1]["isometry_defect"]), 0.01, places=9)
