"""
Synthetic cohorts: ventricle-like ED meshes of varying size, systolic sequences
shot from known momenta and forces, and a ground-truth record for the oracles.

Each subject draws from its own generator seeded by (seed, group, index), so the
cohort is identical whatever the worker count.
"""
from dataclasses import dataclass
import json
import logging
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.spatial.transform import Rotation

from geometry.exceptions import InvalidArgumentError
from geometry.shooting import shoot
from geometry.types import ControlSystem, ForceField, IntegratorConfig, LandmarkSet, to_numpy
from geometry.workers import map_ordered
from meshes.io import write_mesh
from meshes.metrics import ejection_fraction_from_volumes, signed_volume
from meshes.shapes import ventricle
from registration.control_points import initial_control_points
from registration.io import write_control_points, write_momenta
from spline.io import write_forces
from spline.regression import choose_n_steps, frame_steps

from .manifest import ManifestEntry, write_manifest

logger = logging.getLogger(__name__)

BETA_MAX = 64.0
# Contraction momentum per mm of distance from the centroid, before the EF fit.
CONTRACTION = 0.1
MANIFEST_FILE = "manifest.csv"
GROUND_TRUTH_FILE = "ground_truth.json"
TEMPLATE_FILE = "template.vtk"


@dataclass(frozen=True)
class PlantedSignal:
    indices: tuple
    directions: np.ndarray
    offset: float

    def momenta(self, n_points):
        shift = np.zeros((n_points, 3))
        for index, direction in zip(self.indices, self.directions):
            shift[index] = self.offset * direction
        return shift


@dataclass(frozen=True)
class SubjectTask:
    subject_id: str
    group: str
    group_index: int
    index: int


def plant_signal(rng, n_points, count, offset):
    if count > n_points:
        raise InvalidArgumentError("more planted points than generator control points",
                                   context={"planted": count, "points": n_points})
    indices = tuple(int(i) for i in np.sort(rng.choice(n_points, size=count, replace=False)))
    directions = rng.normal(size=(count, 3))
    directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
    return PlantedSignal(indices, directions, float(offset))


def random_rigid_motion(rng, max_rotation_deg, max_translation):
    axis = rng.normal(size=3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = np.deg2rad(rng.uniform(0.0, max_rotation_deg))
    rotation = Rotation.from_rotvec(angle * axis).as_matrix()
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return rotation, translation


def systolic_trajectory(ed, control_points, momenta, forces, kernel, integrator, scale):
    """Shoot (scale * momenta, scale * forces) from ``ed``; returns the FlowResult."""
    return shoot(ControlSystem(control_points, scale * momenta), ed, kernel, integrator,
                 ForceField(scale * forces))


def fit_contraction_scale(ef_of_scale, ef_target, scale_max=BETA_MAX):
    """Scale of the generating momenta and forces at which the ES frame has ``ef_target``."""
    if ef_target == 0:
        return 0.0
    upper = 1.0
    while ef_of_scale(upper) < ef_target:
        if upper >= scale_max:
            raise InvalidArgumentError("EF target is out of reach of the generator",
                                       context={"ef_target": ef_target, "scale": upper})
        upper *= 2.0
    return float(brentq(lambda scale: ef_of_scale(scale) - ef_target, 0.0, upper, xtol=1e-14))


class CohortGenerator:
    def __init__(self, config, out_dir, seed):
        if seed is None:
            raise InvalidArgumentError("synthetic cohorts need a seed")
        self.settings = config.section("synth")
        self.kernel = config.kernel
        self.scheme = config.integrator.scheme
        self.out_dir = Path(out_dir)
        self.seed = int(seed)
        groups = self.settings["groups"]
        if not any(group["count"] > 0 for group in groups.values()):
            raise InvalidArgumentError("the cohort spec has no subjects")
        self.group_names = sorted(groups)

        self.template = ventricle(self.settings["radius"], self.settings["depth"], self.settings["base_height"],
                                  self.settings["subdivisions"])
        self.template_volume = signed_volume(self.template)
        self.control_points = initial_control_points(self.template.vertices, self.settings["generator_points"])
        self.n_steps = choose_n_steps(self.settings["n_frames"])
        self.steps = frame_steps(self.settings["n_frames"], self.n_steps)
        self.integrator = IntegratorConfig(self.n_steps, self.scheme)

        signal_rng = np.random.default_rng([self.seed, 0])
        self.signals = {
            name: plant_signal(signal_rng, len(self.control_points), groups[name]["planted_points"],
                               groups[name]["offset"])
            for name in self.group_names
        }

    def tasks(self):
        groups = self.settings["groups"]
        return [
            SubjectTask(f"{name}_{index:03d}", name, group_index, index)
            for group_index, name in enumerate(self.group_names)
            for index in range(groups[name]["count"])
        ]

    def generate(self, task: SubjectTask):
        settings = self.settings
        rng = np.random.default_rng([self.seed, 1 + task.group_index, task.index])
        volume_factor = float(rng.uniform(*settings["volume_range"]))
        ef_target = float(rng.uniform(*settings["ef_range"]))
        size = volume_factor ** (1.0 / 3.0)

        center = self.template.vertices.centroid()
        scaled = self.template.vertices.scaled(size, center)
        control_points = center + size * (self.control_points - center)
        shape_momenta = rng.normal(scale=settings["shape_variation"] * settings["radius"] * size,
                                   size=control_points.shape)
        ed_points = to_numpy(shoot(ControlSystem(control_points, shape_momenta), scaled, self.kernel,
                                   self.integrator).final_landmarks())
        ed = self.template.with_vertices(ed_points)

        contraction = -CONTRACTION * (control_points - ed.vertices.centroid())
        typical = float(np.linalg.norm(contraction, axis=1).mean())
        momenta = (contraction + self.signals[task.group].momenta(len(control_points))
                   + 0.05 * typical * rng.normal(size=control_points.shape))
        forces = settings["force_scale"] * typical * rng.normal(size=(self.n_steps,) + control_points.shape)
        ed_volume = signed_volume(ed)

        def ef_of_scale(scale):
            trajectory = systolic_trajectory(ed.vertices, control_points, momenta, forces, self.kernel,
                                             self.integrator, scale)
            es = ed.with_vertices(to_numpy(trajectory.final_landmarks()))
            return ejection_fraction_from_volumes(ed_volume, signed_volume(es, check=False))

        scale = fit_contraction_scale(ef_of_scale, ef_target)
        trajectory = systolic_trajectory(ed.vertices, control_points, momenta, forces, self.kernel,
                                         self.integrator, scale)
        rotation, translation = random_rigid_motion(rng, settings["max_rotation"], settings["max_translation"])
        frames = []
        for step in self.steps:
            points = to_numpy(trajectory.landmarks[step]) @ rotation.T + translation
            frames.append(self.template.with_vertices(LandmarkSet(points)))

        subject_dir = self.out_dir / "meshes" / task.subject_id
        paths = [
            write_mesh(frame, subject_dir / f"frame_{index:02d}.{settings['format']}")
            for index, frame in enumerate(frames)
        ]
        truth_dir = self.out_dir / "ground_truth" / task.subject_id
        write_momenta(truth_dir / "momenta.csv", control_points, scale * momenta)
        write_forces(truth_dir / "forces.csv", ForceField(scale * forces))

        ef = ejection_fraction_from_volumes(signed_volume(frames[0]), signed_volume(frames[-1]))
        logger.debug("%s: EF %.4f (target %.4f), volume x%.3f", task.subject_id, ef, ef_target, volume_factor)
        truth = {
            "group": task.group,
            "ef_target": ef_target,
            "ef": ef,
            "volume_factor": volume_factor,
            "ed_volume": signed_volume(frames[0]),
            "contraction_scale": scale,
            "rotation": rotation.tolist(),
            "translation": translation.tolist(),
            "momenta": f"ground_truth/{task.subject_id}/momenta.csv",
            "forces": f"ground_truth/{task.subject_id}/forces.csv",
        }
        entry = ManifestEntry(task.subject_id, task.group, 0, len(frames) - 1, tuple(paths))
        return entry, truth

    def run(self, workers=1):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_mesh(self.template, self.out_dir / TEMPLATE_FILE)
        write_control_points(self.out_dir / "ground_truth" / "generator_control_points.csv", self.control_points)
        tasks = self.tasks()
        results = map_ordered(self.generate, tasks, workers)
        manifest = write_manifest(self.out_dir / MANIFEST_FILE, [entry for entry, _ in results])
        ground_truth = {
            "seed": self.seed,
            "template_volume": self.template_volume,
            "n_steps": self.n_steps,
            "frame_steps": self.steps,
            "generator_control_points": "ground_truth/generator_control_points.csv",
            "planted": {
                name: {
                    "indices": list(signal.indices),
                    "directions": signal.directions.tolist(),
                    "offset": signal.offset,
                }
                for name, signal in self.signals.items()
            },
            "subjects": {task.subject_id: truth for task, (_, truth) in zip(tasks, results)},
        }
        with open(self.out_dir / GROUND_TRUTH_FILE, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(ground_truth, handle, indent=2, sort_keys=True)
            handle.write("\n")
        logger.info("synthetic cohort of %d subjects written to %s", len(tasks), self.out_dir)
        return manifest, ground_truth


def generate_cohort(config, out_dir, seed=None, workers=1):
    """Write a synthetic cohort under ``out_dir``; returns (manifest path, ground truth)."""
    seed = config.seed if seed is None else seed
    return CohortGenerator(config, out_dir, seed).run(workers)
