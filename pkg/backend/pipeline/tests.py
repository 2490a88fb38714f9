import csv
from io import StringIO
import os
from pathlib import Path
import tempfile

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag

from geometry.exceptions import InvalidArgumentError, InvalidInputError
from meshes.io import read_mesh, write_mesh
from meshes.mesh import SubjectSequence
from meshes.metrics import ejection_fraction
from meshes.shapes import ventricle
from pipeline.config import ConfigError, load_config, validate_config
from pipeline.manifest import ManifestEntry, read_manifest, write_manifest
from pipeline.outputs import frame_metrics, read_json, write_json
from pipeline.runner import ExitStatus, RunReport, run_pipeline
from pipeline.synth import fit_contraction_scale, generate_cohort
from pipeline.validation import validate_transport
from stats.reports import TRANSPORT_FIELDS


SMALL_COHORT = """
seed = 11

[kernel]
sigma = 15.0

[synth]
n_frames = 3
subdivisions = 1
generator_points = 8
ef_range = [0.42, 0.42]
volume_range = [0.8, 1.25]

[synth.groups.Control]
count = 2

[synth.groups.A]
count = 1
planted_points = 1
offset = 1.0
"""

STILL_COHORT = """
seed = 3

[synth]
n_frames = 3
subdivisions = 1
generator_points = 8
ef_range = [0.0, 0.0]
shape_variation = 0.0
force_scale = 0.0

[synth.groups.Control]
count = 1
"""

END_TO_END = """
seed = 7
manifest = "cohort/manifest.csv"

[kernel]
sigma = 15.0

[control_points]
count = 8

[integrator]
n_steps = 6

[atlas]
outer_iters = 2

[ladder]
n_rungs = 3

[optim.registration]
max_iters = 15

[optim.atlas]
max_iters = 10

[optim.control_points]
max_iters = 10

[optim.ladder]
max_iters = 10

[optim.spline]
max_iters = 15

[synth]
n_frames = 3
subdivisions = 1
generator_points = 8

[synth.groups.Control]
count = 3

[synth.groups.A]
count = 3
planted_points = 2
offset = 2.0
"""


def write_text(directory, name, text):
    path = Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def file_bytes(directory, suffixes):
    directory = Path(directory)
    return {
        path.relative_to(directory).as_posix(): path.read_bytes()
        for path in sorted(directory.rglob("*"))
        if path.is_file() and path.suffix in suffixes
    }


### Equivalence classes ###
##  Config validation
#       empty file                               (defaults)
#       unknown key, out-of-range value          (ConfigError with field lines)
#       unreadable or missing file               (ConfigError)
##  Config hash
#       output and workers                       (ignored)
#       any numerical key or the seed            (changes the hash)

class ConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_defaults(self):
        config = validate_config({})
        self.assertEqual(config.kernel.sigma, 15.0)
        self.assertEqual(config.section("control_points")["count"], 60)
        self.assertEqual(config.integrator.n_steps, 10)
        self.assertEqual(config.integrator.scheme.value, "rk4")
        self.assertIsNone(config.alpha)
        self.assertEqual(config.section("transport")["ef_tolerance"], 0.005)
        self.assertEqual(config.section("stats")["alpha"], 0.05)
        self.assertEqual(config.section("stats")["control_group"], "Control")
        self.assertEqual(config.optim("spline").max_iters, 200)
        ladder = config.ladder(2.0)
        self.assertEqual(ladder.n_rungs, 5)
        self.assertEqual(ladder.rung_scale, 1.0)
        self.assertAlmostEqual(ladder.alpha, 0.02)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as raised:
            validate_config({"kernel": {"sigam": 3.0}})
        self.assertIn("kernel.sigam: unknown key", list(raised.exception.lines()))

    def test_unknown_section(self):
        with self.assertRaises(ConfigError) as raised:
            validate_config({"kernal": {}})
        self.assertIn("kernal: unknown key", list(raised.exception.lines()))

    def test_invalid_values(self):
        with self.assertRaises(ConfigError) as raised:
            validate_config({"kernel": {"sigma": 0.0}, "ladder": {"rung_scale": 1.5}, "stats": {"alpha": 2}})
        lines = list(raised.exception.lines())
        for name in ("kernel.sigma", "ladder.rung_scale", "stats.alpha"):
            self.assertTrue(any(line.startswith(name) for line in lines), name)
        self.assertEqual(raised.exception.code, "invalid_config")

    def test_invalid_optimizer_stage(self):
        with self.assertRaises(ConfigError) as raised:
            validate_config({"optim": {"spline": {"backtracking": 1.5}}})
        self.assertTrue(any(line.startswith("optim.spline.backtracking") for line in raised.exception.lines()))

    def test_hash_ignores_output_and_workers(self):
        base = validate_config({"seed": 1, "kernel": {"sigma": 12.0}})
        same = validate_config({"seed": 1, "kernel": {"sigma": 12.0}, "output": "elsewhere", "workers": 8})
        self.assertEqual(base.config_hash, same.config_hash)
        self.assertNotEqual(base.config_hash, validate_config({"seed": 2, "kernel": {"sigma": 12.0}}).config_hash)
        self.assertNotEqual(base.config_hash, validate_config({"seed": 1, "kernel": {"sigma": 13.0}}).config_hash)

    def test_load_resolves_paths_against_config_directory(self):
        path = write_text(self.tmp.name, "exp/config.toml", 'manifest = "data/manifest.csv"\n[kernel]\nsigma = 10.0\n')
        config = load_config(path)
        self.assertEqual(config.kernel.sigma, 10.0)
        self.assertEqual(config.path("manifest"), path.parent.resolve() / "data" / "manifest.csv")

    def test_overrides(self):
        config = validate_config({"seed": 1}).with_overrides(seed=5, output="run", workers=None)
        self.assertEqual(config.seed, 5)
        self.assertTrue(Path(config.values["output"]).is_absolute())
        self.assertIsNone(config.workers)

    def test_missing_and_malformed_files(self):
        with self.assertRaises(ConfigError):
            load_config(Path(self.tmp.name) / "absent.toml")
        with self.assertRaises(ConfigError):
            load_config(write_text(self.tmp.name, "broken.toml", "[kernel\nsigma = 1\n"))


### Equivalence classes ###
##  Manifest rows
#       valid rows, paths relative to the manifest
#       empty file or header only               (no subjects)
#       wrong header, duplicate id, ED == ES, missing frame file

class ManifestTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        mesh = ventricle(subdivisions=1)
        self.frames = tuple(
            write_mesh(mesh.with_vertices(scale * mesh.points), self.root / "meshes" / f"frame_{index}.vtk")
            for index, scale in enumerate((1.0, 0.9, 0.8))
        )

    def write_manifest(self, text):
        return write_text(self.root, "manifest.csv", text)

    def test_write_then_read(self):
        path = write_manifest(self.root / "manifest.csv", [ManifestEntry("s1", "Control", 0, 2, self.frames)])
        with open(path, encoding="utf-8") as handle:
            self.assertIn("meshes/frame_0.vtk;meshes/frame_1.vtk;meshes/frame_2.vtk", handle.read())
        entries = read_manifest(path)
        self.assertEqual(len(entries), 1)
        sequence = entries[0].load()
        self.assertEqual(sequence.es_index, 2)
        self.assertAlmostEqual(ejection_fraction(sequence), 1 - 0.8 ** 3, places=12)

    def test_empty_manifest(self):
        for text in ("", "subject_id,group,ed_index,es_index,frames\n"):
            with self.assertRaises(InvalidInputError) as raised:
                read_manifest(self.write_manifest(text))
            self.assertEqual(raised.exception.message, "no subjects")
            self.assertEqual(raised.exception.code, "empty_manifest")

    def test_wrong_header(self):
        with self.assertRaises(InvalidInputError):
            read_manifest(self.write_manifest("id,group,frames\ns1,Control,a.vtk\n"))

    def test_invalid_rows(self):
        header = "subject_id,group,ed_index,es_index,frames\n"
        frames = "meshes/frame_0.vtk;meshes/frame_1.vtk"
        cases = [
            f"s1,Control,0,0,{frames}\n",
            f"s1,Control,0,1,{frames}\ns1,Control,0,1,{frames}\n",
            "s1,Control,0,1,meshes/frame_0.vtk;meshes/absent.vtk\n",
            "s1,Control,0,1,meshes/frame_0.vtk\n",
        ]
        for rows in cases:
            with self.assertRaises(InvalidInputError) as raised:
                read_manifest(self.write_manifest(header + rows))
            self.assertEqual(raised.exception.code, "invalid_manifest", rows)


class OutputTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_frame_metrics_of_uniform_scaling(self):
        mesh = ventricle(subdivisions=1)
        subject = SubjectSequence("s1", "Control", [mesh, mesh.with_vertices(0.9 * mesh.points)], 0, 1)
        rows = frame_metrics(subject)
        self.assertEqual([row["frame"] for row in rows], [0, 1])
        self.assertEqual(rows[0]["ef"], 0.0)
        self.assertAlmostEqual(rows[1]["ef"], 1 - 0.9 ** 3, places=12)
        self.assertAlmostEqual(rows[1]["as_mean"], 0.9 ** 2 - 1, places=12)
        self.assertAlmostEqual(rows[1]["as_std"], 0.0, places=12)
        self.assertEqual(rows[1]["excluded_cells"], 0)

    def test_json_is_sorted_and_plain(self):
        path = write_json(Path(self.tmp.name) / "out" / "record.json",
                          {"b": np.float64(0.5), "a": np.arange(3), "c": Path("x/y")})
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
        self.assertLess(text.index('"a"'), text.index('"b"'))
        self.assertEqual(read_json(path), {"a": [0, 1, 2], "b": 0.5, "c": "x/y"})


class RunReportTests(SimpleTestCase):
    def test_exit_status(self):
        subjects = ["a", "b", "c"]
        self.assertEqual(RunReport(subjects).exit_status, ExitStatus.OK)
        partial = RunReport(subjects, {"b": {"stage": "transport", "error": "diverged"}})
        self.assertEqual(partial.exit_status, ExitStatus.PARTIAL)
        self.assertEqual(list(partial.failure_lines()), ["b: transport: diverged"])
        everything = {name: {"stage": "align", "error": "x"} for name in subjects}
        self.assertEqual(RunReport(subjects, everything).exit_status, ExitStatus.TOTAL)


### Equivalence classes ###
##  Synthetic cohorts
#       EF target inside the generator's reach   (measured EF matches)
#       zero deformation                         (identical frames, EF 0)
#       repeated seed                            (identical files)
#       no seed, unreachable EF                  (InvalidArgumentError)

class SynthTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def config(self, text):
        return load_config(write_text(self.root, "config.toml", text))

    def test_contraction_scale(self):
        def ef_of_scale(scale):
            return 1.0 - 1.0 / (1.0 + scale)

        self.assertEqual(fit_contraction_scale(ef_of_scale, 0.0), 0.0)
        self.assertAlmostEqual(fit_contraction_scale(ef_of_scale, 0.5), 1.0, places=10)
        self.assertAlmostEqual(fit_contraction_scale(ef_of_scale, 0.9), 9.0, places=8)
        with self.assertRaises(InvalidArgumentError):
            fit_contraction_scale(ef_of_scale, 0.999)

    def test_ef_target(self):
        manifest, truth = generate_cohort(self.config(SMALL_COHORT), self.root / "cohort")
        entries = read_manifest(manifest)
        self.assertEqual([entry.subject_id for entry in entries], ["A_000", "Control_000", "Control_001"])
        for entry in entries:
            sequence = entry.load()
            self.assertEqual(len(sequence), 3)
            self.assertLessEqual(abs(ejection_fraction(sequence) - 0.42), 1e-3)
            self.assertAlmostEqual(truth["subjects"][entry.subject_id]["ef"], ejection_fraction(sequence), places=10)
        self.assertEqual(len(truth["planted"]["A"]["indices"]), 1)
        self.assertEqual(truth["planted"]["Control"]["indices"], [])
        self.assertTrue((self.root / "cohort" / "ground_truth" / "A_000" / "forces.csv").exists())

    def test_zero_deformation(self):
        manifest, truth = generate_cohort(self.config(STILL_COHORT), self.root / "cohort")
        sequence = read_manifest(manifest)[0].load()
        for frame in sequence.frames[1:]:
            np.testing.assert_array_equal(frame.points, sequence.ed.points)
        self.assertEqual(ejection_fraction(sequence), 0.0)
        self.assertEqual(truth["subjects"]["Control_000"]["contraction_scale"], 0.0)

    def test_same_seed_same_files(self):
        config = self.config(SMALL_COHORT)
        generate_cohort(config, self.root / "first")
        generate_cohort(config, self.root / "second", workers=2)
        suffixes = (".vtk", ".csv", ".json")
        first = file_bytes(self.root / "first", suffixes)
        self.assertEqual(first, file_bytes(self.root / "second", suffixes))
        self.assertIn("meshes/A_000/frame_02.vtk", first)

    def test_other_seed_other_cohort(self):
        config = self.config(SMALL_COHORT)
        generate_cohort(config, self.root / "first")
        generate_cohort(config, self.root / "second", seed=12)
        first = read_mesh(self.root / "first" / "meshes" / "A_000" / "frame_00.vtk")
        second = read_mesh(self.root / "second" / "meshes" / "A_000" / "frame_00.vtk")
        self.assertFalse(np.array_equal(first.points, second.points))

    def test_seed_required(self):
        config = self.config(SMALL_COHORT.replace("seed = 11", ""))
        with self.assertRaises(InvalidArgumentError):
            generate_cohort(config, self.root / "cohort")


class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def call(self, name, **options):
        out, err = StringIO(), StringIO()
        call_command(name, stdout=out, stderr=err, **options)
        return out.getvalue(), err.getvalue()

    def assertExit(self, code, name, **options):
        err = StringIO()
        with self.assertRaises(CommandError) as raised:
            call_command(name, stdout=StringIO(), stderr=err, **options)
        self.assertEqual(raised.exception.returncode, code)
        return raised.exception, err.getvalue()

    def test_invalid_config_lists_fields(self):
        config = write_text(self.root, "bad.toml", "[kernel]\nsigma = -1.0\n")
        _, err = self.assertExit(ExitStatus.USAGE, "pipeline", config=str(config), out=str(self.root / "out"))
        self.assertIn("kernel.sigma", err)

    def test_empty_manifest(self):
        write_text(self.root, "manifest.csv", "subject_id,group,ed_index,es_index,frames\n")
        config = write_text(self.root, "config.toml", 'manifest = "manifest.csv"\n')
        error, _ = self.assertExit(ExitStatus.USAGE, "pipeline", config=str(config), out=str(self.root / "out"))
        self.assertIn("no subjects", str(error))

    def test_synth_needs_seed(self):
        config = write_text(self.root, "config.toml", SMALL_COHORT.replace("seed = 11", ""))
        self.assertExit(ExitStatus.USAGE, "synth", config=str(config), out=str(self.root / "cohort"))

    def test_synth_then_granular_stages_need_upstream(self):
        config = write_text(self.root, "config.toml", SMALL_COHORT)
        out, _ = self.call("synth", config=str(config), out=str(self.root / "cohort"))
        self.assertIn("Wrote 3 subjects", out)
        manifest = str(self.root / "cohort" / "manifest.csv")
        for name in ("transport", "spline", "stats"):
            error, _ = self.assertExit(ExitStatus.USAGE, name, config=str(config), manifest=manifest,
                                       out=str(self.root / "run"))
            self.assertIn("stage first", str(error))

    def test_register(self):
        mesh = ventricle(subdivisions=1)
        source = write_mesh(mesh, self.root / "source.vtk")
        target = write_mesh(mesh.with_vertices(0.95 * mesh.points), self.root / "target.vtk")
        config = write_text(self.root, "config.toml", "[control_points]\ncount = 8\n[optim.registration]\nmax_iters = 20\n")
        self.call("register", config=str(config), source=str(source), target=str(target), out=str(self.root / "reg"))
        record = read_json(self.root / "reg" / "registration.json")
        self.assertGreater(record["geodesic_length"], 0.0)
        with open(self.root / "reg" / "momenta.csv", encoding="utf-8", newline="") as handle:
            self.assertEqual(len(list(csv.DictReader(handle))), 8)


@tag("slow")
class EndToEndTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config = load_config(write_text(self.root, "config.toml", END_TO_END))
        generate_cohort(self.config, self.root / "cohort")

    def test_rerun_is_byte_identical(self):
        first = run_pipeline(self.config, self.root / "first", workers=1)
        second = run_pipeline(self.config, self.root / "second", workers=2)
        self.assertEqual(first.failures, second.failures)
        self.assertLess(len(first.failures), len(first.subjects))
        csvs = file_bytes(self.root / "first", (".csv",))
        self.assertEqual(csvs, file_bytes(self.root / "second", (".csv",)))
        for name in ("metrics.csv", "atlas/control_points.csv", "stats/lambda.csv"):
            self.assertIn(name, csvs)
        summary = read_json(self.root / "first" / "run_summary.json")
        self.assertEqual(summary["config_hash"], self.config.config_hash)
        self.assertEqual(summary["outputs"], read_json(self.root / "second" / "run_summary.json")["outputs"])
        provenance = read_json(self.root / "first" / "provenance.json")
        self.assertEqual(provenance["seed"], 7)

    def test_validation_prefers_scaled_transport(self):
        report = run_pipeline(self.config, self.root / "run")
        self.assertEqual(report.exit_status, ExitStatus.OK)
        table, _ = validate_transport(self.config, self.root / "run")
        ef = next(row for row in table if row["metric"] == "ef")
        self.assertLessEqual(ef["spt_rmse"], 0.005)
        self.assertLessEqual(ef["spt_rmse"], ef["pt_rmse"])
        self.assertTrue(os.path.exists(self.root / "run" / "validation" / "lambda.csv"))
        with open(self.root / "run" / "transport.csv", encoding="utf-8", newline="") as handle:
            transport_rows = list(csv.DictReader(handle))
        self.assertEqual(list(transport_rows[0]), TRANSPORT_FIELDS)
        self.assertEqual([row["subject_id"] for row in transport_rows], sorted(report.subjects))
        for row in transport_rows:
            self.assertLessEqual(abs(float(row["ef_reconstructed"]) - float(row["ef_original"])), 0.005)
        with open(self.root / "run" / "stats" / "hotelling.csv", encoding="utf-8", newline="") as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual({row["comparison"] for row in rows}, {"A_vs_Control"})
        family = read_json(self.root / "run" / "stats" / "summary.json")["comparisons"]["A_vs_Control"]
        self.assertEqual(family["bonferroni_family"] + family["untestable"], len(rows))
        self.assertEqual(report.stages["stats"]["descriptors"], 6)
