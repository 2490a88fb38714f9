"""
Stage runner for the batch pipeline.

Every stage reads what the previous stages left in the output directory, so the
granular commands can resume a run stage by stage:

    subjects/<id>/alignment.json      align
    atlas/atlas.vtk, atlas.json       atlas
    atlas/control_points.csv          control_points
    subjects/<id>/transport/...       transport
    transport.csv                     transport
    subjects/<id>/spline/...          spline
    stats/*.csv, stats/summary.json   stats

Per-subject work runs through ``map_isolated``: a subject that fails is recorded
with its stage and skipped by later stages; the others carry on.
"""
from dataclasses import dataclass, field
import logging
from pathlib import Path

from django.conf import settings
import numpy as np
import torch

from geometry.exceptions import DependencyError, InsufficientDataError, InvalidArgumentError
from geometry.kernels import rkhs_norm
from geometry.types import LandmarkSet
from geometry.workers import map_isolated
from meshes.alignment import rigid_align
from meshes.io import read_mesh, write_mesh
from meshes.metrics import signed_volume
from registration.atlas import estimate_atlas
from registration.control_points import initial_control_points, optimize_control_points
from registration.io import file_digest, read_control_points, write_control_points, write_momenta
from registration.lddmm import default_alpha
from spline.io import read_spline_fit, write_spline_fit
from spline.regression import ObservationSequence, choose_n_steps, fit_spline
from stats.groupwise import SubjectDescriptor, groupwise_tests
from stats.regression import LambdaRecord, cohort_summary, lambda_volume_regression
from stats.reports import (
    comparison_summaries, write_block_tests, write_lambda_records, write_regression, write_significance_map,
    write_summaries, write_transport_results,
)
from transport.scaling import scaled_transport

from .manifest import read_manifest
from .outputs import frame_metrics, read_json, write_json, write_metrics, write_run_summary

logger = logging.getLogger(__name__)

PIPELINE_STAGES = ("align", "atlas", "control_points", "transport", "spline", "stats")
MESH_SUFFIX = ".vtk"


class ExitStatus:
    OK = 0
    USAGE = 1
    PARTIAL = 2
    TOTAL = 3


@dataclass
class RunReport:
    subjects: list
    failures: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    @property
    def exit_status(self):
        if not self.failures:
            return ExitStatus.OK
        if len(self.failures) >= len(self.subjects):
            return ExitStatus.TOTAL
        return ExitStatus.PARTIAL

    def failure_lines(self):
        for subject_id in sorted(self.failures):
            failure = self.failures[subject_id]
            yield f"{subject_id}: {failure['stage']}: {failure['error']}"


class PipelineRun:
    def __init__(self, config, out_dir=None, workers=None):
        self.config = config
        out_dir = out_dir or config.path("output")
        if out_dir is None:
            raise InvalidArgumentError("no output directory given", code="invalid_config")
        self.out = Path(out_dir)
        self.workers = workers or config.workers or settings.SYSTOLE_WORKERS
        self.kernel = config.kernel
        self.integrator = config.integrator
        self.failures = {}
        self.stages = {}
        self._entries = None
        torch.set_num_threads(settings.SYSTOLE_TORCH_THREADS)

    # Paths

    def subject_dir(self, subject_id):
        return self.out / "subjects" / subject_id

    @property
    def atlas_path(self):
        return self.out / "atlas" / f"atlas{MESH_SUFFIX}"

    @property
    def atlas_record_path(self):
        return self.out / "atlas" / "atlas.json"

    @property
    def control_points_path(self):
        return self.out / "atlas" / "control_points.csv"

    def transport_dir(self, subject_id):
        return self.subject_dir(subject_id) / "transport"

    def spline_dir(self, subject_id):
        return self.subject_dir(subject_id) / "spline"

    # Inputs

    @property
    def entries(self):
        if self._entries is None:
            manifest = self.config.path("manifest")
            if manifest is None:
                raise InvalidArgumentError("no manifest given", code="invalid_config")
            self._entries = read_manifest(manifest)
        return self._entries

    def active_entries(self):
        return [entry for entry in self.entries if entry.subject_id not in self.failures]

    def fail(self, subject_id, stage, error):
        logger.error("%s failed in %s: %s", subject_id, stage, error)
        self.failures[subject_id] = {"stage": stage, "error": str(error)}

    def isolated(self, stage, func, entries):
        """Run ``func`` per entry; returns {subject_id: result} for the subjects that succeeded."""
        results = {}
        for entry, (result, error) in zip(entries, map_isolated(func, entries, self.workers)):
            if error is not None:
                self.fail(entry.subject_id, stage, error)
            else:
                results[entry.subject_id] = result
        self.stages[stage] = {"succeeded": len(results), "failed": len(entries) - len(results)}
        logger.info("stage %s: %d of %d subjects done", stage, len(results), len(entries))
        return results

    def require(self, path, stage):
        if not Path(path).exists():
            raise DependencyError(f"run the {stage} stage first", context={"missing": str(path)})
        return path

    def aligned_sequence(self, entry):
        """The subject's frames moved into the atlas frame by its stored rigid motion."""
        record_path = self.subject_dir(entry.subject_id) / "alignment.json"
        if not record_path.exists():
            raise DependencyError("subject was not aligned", context={"subject": entry.subject_id})
        record = read_json(record_path)
        rotation = np.asarray(record["rotation"])
        translation = np.asarray(record["translation"])
        sequence = entry.load()
        frames = [frame.with_vertices(LandmarkSet(frame.points @ rotation.T + translation))
                  for frame in sequence.frames]
        return sequence.with_frames(frames)

    def atlas(self):
        self.require(self.atlas_path, "atlas")
        return read_mesh(self.atlas_path)

    def registration_alpha(self):
        return read_json(self.require(self.atlas_record_path, "atlas"))["alpha"]

    def control_points(self):
        return read_control_points(self.require(self.control_points_path, "control_points"))

    # Stages

    def align(self):
        atlas_file = self.config.path("atlas", "file")
        entries = self.active_entries()
        if atlas_file is not None:
            reference = read_mesh(atlas_file)
            reference_name = str(atlas_file)
        else:
            control_group = self.config.section("stats")["control_group"]
            controls = [entry for entry in entries if entry.group == control_group] or entries
            first = min(controls, key=lambda entry: entry.subject_id)
            sequence = first.load()
            reference = sequence.ed
            reference_name = first.subject_id

        def align_subject(entry):
            sequence = entry.load()
            alignment = rigid_align(sequence.ed.vertices, reference.vertices)
            write_json(self.subject_dir(entry.subject_id) / "alignment.json", {
                "reference": reference_name,
                "rotation": alignment.rotation,
                "translation": alignment.translation,
                "residual": alignment.residual,
            })
            aligned = sequence.with_frames([
                frame.with_vertices(LandmarkSet(alignment.apply(frame.points))) for frame in sequence.frames
            ])
            return aligned, frame_metrics(aligned)

        results = self.isolated("align", align_subject, entries)
        write_metrics(self.out / "metrics.csv", [row for _, rows in results.values() for row in rows])
        return {subject_id: aligned for subject_id, (aligned, _) in results.items()}

    def estimate_atlas(self):
        atlas_file = self.config.path("atlas", "file")
        if atlas_file is not None:
            atlas = read_mesh(atlas_file)
            alpha = self.config.alpha or default_alpha(atlas.vertices)
            record = {"source": str(atlas_file), "alpha": alpha}
        else:
            control_group = self.config.section("stats")["control_group"]
            controls = sorted((entry for entry in self.active_entries() if entry.group == control_group),
                              key=lambda entry: entry.subject_id)
            eds = [self.aligned_sequence(entry).ed for entry in controls]
            shapes = [ed.vertices for ed in eds]
            if len(shapes) < 2:
                raise InsufficientDataError("an atlas needs at least two control subjects",
                                            context={"control_group": control_group, "subjects": len(shapes)})
            mean_shape = LandmarkSet(np.mean([shape.points for shape in shapes], axis=0))
            estimation_alpha = self.config.alpha or default_alpha(mean_shape)
            result = estimate_atlas(
                shapes, self.kernel, estimation_alpha,
                initial_control_points(mean_shape, self.config.section("control_points")["count"]),
                self.config.optim("atlas"), self.config.section("atlas")["outer_iters"], self.integrator,
                workers=self.workers,
            )
            atlas = eds[0].with_vertices(result.atlas)
            alpha = self.config.alpha or default_alpha(atlas.vertices)
            record = {"source": "estimated", "alpha": alpha, "estimation_alpha": estimation_alpha,
                      "shapes": len(shapes), "trace": result.trace}
        record["volume"] = signed_volume(atlas)
        write_mesh(atlas, self.atlas_path)
        write_json(self.atlas_record_path, record)
        self.stages["atlas"] = {"source": record["source"]}
        logger.info("atlas: volume %.6g, alpha %.6g (%s)", record["volume"], alpha, record["source"])
        return atlas

    def optimize_control_points(self):
        section = self.config.section("control_points")
        source = self.config.path("control_points", "file")
        if source is not None:
            control_points = read_control_points(source)
            record = {"source": str(source), "count": len(control_points)}
        else:
            atlas = self.atlas()
            targets = [self.aligned_sequence(entry).ed.vertices for entry in self.active_entries()]
            result = optimize_control_points(
                atlas.vertices, targets, section["count"], self.kernel, self.registration_alpha(),
                self.config.optim("control_points"), self.integrator, control_point_step=section["step"],
            )
            control_points = result.control_points
            record = {"source": "optimized", "count": len(control_points), "initial_cost": result.initial_cost,
                      "cost": result.cost, "status": result.status, "iterations": result.iterations}
        write_control_points(self.control_points_path, control_points)
        write_json(self.out / "atlas" / "control_points.json", record)
        self.stages["control_points"] = {"source": record["source"]}
        return control_points

    def transport(self):
        atlas = self.atlas()
        alpha = self.registration_alpha()
        control_points = self.control_points()
        ladder = self.config.ladder(alpha)
        ef_tolerance = self.config.section("transport")["ef_tolerance"]
        optim_config = self.config.optim("registration")

        def transport_subject(entry):
            subject = self.aligned_sequence(entry)
            result = scaled_transport(subject, atlas, control_points, self.kernel, alpha, ladder, ef_tolerance,
                                      optim_config, self.integrator)
            directory = self.transport_dir(entry.subject_id)
            for index, momenta, transported in zip(result.frame_indices, result.frame_momenta,
                                                   result.transported_momenta):
                write_momenta(directory / f"frame_{index:02d}_momenta.csv", control_points, momenta)
                write_momenta(directory / f"frame_{index:02d}_transported.csv", result.atlas_control_points,
                              transported)
            for name, scaled in (("pt", False), ("spt", True)):
                for index, mesh in zip(result.frame_indices,
                                       result.reconstruct(atlas, self.kernel, self.integrator, scaled)):
                    write_mesh(mesh, directory / name / f"frame_{index:02d}{MESH_SUFFIX}")
            write_json(directory / "transport.json", {
                "group": subject.group,
                "ed_index": subject.ed_index,
                "es_index": subject.es_index,
                "frame_indices": result.frame_indices,
                "lambda": result.lambda_,
                "ef_original": result.ef_original,
                "ef_reconstructed": result.ef_reconstructed,
                "ef_unscaled": result.ef_unscaled,
                "ed_volume": signed_volume(subject.ed),
                "es_momentum_norm": rkhs_norm(control_points, result.frame_momenta[subject.es_index], self.kernel),
                "norm_in": result.norm_in,
                "norm_out": result.norm_out,
                "isometry_defect": result.isometry_defect,
                "main_geodesic_length": result.main_geodesic_length,
                "ladder_converged": result.ladder_converged,
                "status": result.status,
            })
            return result

        results = self.isolated("transport", transport_subject, self.active_entries())
        write_transport_results(self.out / "transport.csv", results)
        return results

    def spline_n_steps(self, records):
        n_steps = self.config.section("spline")["n_steps"]
        if n_steps is not None:
            return n_steps
        longest = max(abs(record["es_index"] - record["ed_index"]) + 1 for record in records.values())
        return choose_n_steps(longest)

    def fit_splines(self):
        alpha = self.registration_alpha()
        control_points = self.control_points()
        section = self.config.section("spline")
        entries = []
        records = {}
        for entry in self.active_entries():
            record_path = self.transport_dir(entry.subject_id) / "transport.json"
            if record_path.exists():
                entries.append(entry)
                records[entry.subject_id] = read_json(record_path)
            else:
                self.fail(entry.subject_id, "spline", DependencyError("no transport outputs"))
        if not entries:
            raise DependencyError("run the transport stage first", context={"missing": "transport.json"})
        n_steps = self.spline_n_steps(records)

        def fit_subject(entry):
            record = records[entry.subject_id]
            ed_index, es_index = record["ed_index"], record["es_index"]
            step = 1 if es_index > ed_index else -1
            frames = [
                read_mesh(self.transport_dir(entry.subject_id) / "spt" / f"frame_{index:02d}{MESH_SUFFIX}").vertices
                for index in range(ed_index, es_index + step, step)
            ]
            obs = ObservationSequence.from_frames(frames, n_steps)
            integrator = obs.integrator(self.integrator.scheme)
            fit = fit_spline(obs, control_points, self.kernel, alpha, integrator, self.config.optim("spline"),
                             fit_forces=section["fit_forces"], warm_start_config=self.config.optim("registration"),
                             label=f"{entry.subject_id} spline")
            return write_spline_fit(fit, self.spline_dir(entry.subject_id), self.kernel, integrator,
                                    control_points_file=self.control_points_path)

        return self.isolated("spline", fit_subject, entries)

    def descriptors(self):
        digest = file_digest(self.require(self.control_points_path, "control_points"))
        descriptors = []
        for entry in self.active_entries():
            directory = self.spline_dir(entry.subject_id)
            if not (directory / "spline.json").exists():
                self.fail(entry.subject_id, "stats", DependencyError("no spline fit"))
                continue
            control_points, momenta, forces, metadata = read_spline_fit(directory)
            if metadata["control_points_sha256"] != digest:
                self.fail(entry.subject_id, "stats", DependencyError("spline fit is stale for these control points"))
                continue
            descriptors.append(SubjectDescriptor.from_arrays(entry.subject_id, entry.group, control_points,
                                                             momenta, forces))
        return descriptors

    def statistics(self):
        section = self.config.section("stats")
        stats_dir = self.out / "stats"
        descriptors = self.descriptors()
        if not descriptors:
            raise DependencyError("run the spline stage first", context={"missing": "spline fits"})
        outcome = {"descriptors": len(descriptors)}
        try:
            tests = groupwise_tests(descriptors, section["control_group"], section["alpha"], self.workers)
        except InsufficientDataError as error:
            logger.warning("group comparisons skipped: %s", error)
            outcome["tests"] = "skipped"
        else:
            write_block_tests(stats_dir / "hotelling.csv", tests)
            write_significance_map(stats_dir / "significance_map.csv", tests, descriptors[0].control_points)
            write_json(stats_dir / "summary.json", {
                "alpha": section["alpha"],
                "correction": "bonferroni",
                "comparisons": comparison_summaries(tests),
            })
            outcome["significant_blocks"] = sum(test.significant for test in tests)

        records = []
        ef_values = {}
        for entry in self.active_entries():
            record = read_json(self.transport_dir(entry.subject_id) / "transport.json")
            records.append(LambdaRecord(entry.subject_id, record["lambda"], record["ed_volume"],
                                        record["es_momentum_norm"]))
            ef_values.setdefault(entry.group, []).append(record["ef_original"])
        atlas_volume = read_json(self.require(self.atlas_record_path, "atlas"))["volume"]
        write_lambda_records(stats_dir / "lambda.csv", records, atlas_volume)
        try:
            regression = lambda_volume_regression(records, atlas_volume)
        except InsufficientDataError as error:
            logger.warning("lambda regression skipped: %s", error)
        else:
            write_regression(stats_dir / "lambda_regression.csv", regression)
            outcome["lambda_r_squared"] = regression.r_squared

        summaries = {}
        for group, values in sorted(ef_values.items()):
            if len(values) >= 2:
                summaries[("ef", group)] = cohort_summary(values)
        write_summaries(stats_dir / "summary.csv", summaries)
        self.stages["stats"] = outcome
        return outcome

    # Orchestration

    def finish(self):
        subjects = {
            entry.subject_id: self.failures.get(entry.subject_id, {"stage": None, "error": None})
            for entry in self.entries
        }
        write_run_summary(self.out, self.config, self.config.seed, self.stages, subjects)
        return self.report()

    def report(self, subject_ids=None):
        subject_ids = [entry.subject_id for entry in self.entries] if subject_ids is None else list(subject_ids)
        failures = {sid: failure for sid, failure in self.failures.items() if sid in subject_ids}
        return RunReport(subject_ids, failures, dict(self.stages))

    def run(self, stages=PIPELINE_STAGES):
        """Run ``stages`` in order; a stage that cannot run at all fails every remaining subject."""
        actions = {
            "align": self.align,
            "atlas": self.estimate_atlas,
            "control_points": self.optimize_control_points,
            "transport": self.transport,
            "spline": self.fit_splines,
            "stats": self.statistics,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        logger.info("pipeline: %d subjects, stages %s, config %s", len(self.entries), ",".join(stages),
                    self.config.config_hash[:12])
        for stage in stages:
            if not self.active_entries():
                break
            try:
                actions[stage]()
            except DependencyError:
                raise
            except Exception as error:  # noqa: BLE001 - a stage-wide failure fails every subject
                logger.exception("stage %s failed", stage)
                for entry in self.active_entries():
                    self.fail(entry.subject_id, stage, error)
                break
        return self.finish()


def run_pipeline(config, out_dir=None, workers=None, stages=PIPELINE_STAGES):
    return PipelineRun(config, out_dir, workers).run(stages)
