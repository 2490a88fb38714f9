from pathlib import Path

from django.core.management.base import CommandError

from meshes.io import read_mesh
from pipeline.management.base import PipelineCommand
from pipeline.outputs import write_json
from pipeline.runner import ExitStatus
from registration.control_points import initial_control_points
from registration.io import read_control_points, write_momenta
from registration.lddmm import RegistrationProblem, default_alpha, register


class Command(PipelineCommand):
    help = "Registers one mesh to another and writes the optimal momenta"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--source", required=True, help="Template mesh (.vtk or .off)")
        parser.add_argument("--target", required=True, help="Target mesh with the same vertex order")

    def run(self, config, options):
        out_dir = config.path("output")
        if out_dir is None:
            raise CommandError("give an output directory with --out", returncode=ExitStatus.USAGE)
        out_dir = Path(out_dir)
        source = read_mesh(options["source"])
        target = read_mesh(options["target"])

        control_points_file = config.path("control_points", "file")
        if control_points_file is not None:
            control_points = read_control_points(control_points_file)
        else:
            control_points = initial_control_points(source.vertices, config.section("control_points")["count"])
        alpha = config.alpha or default_alpha(source.vertices)
        problem = RegistrationProblem(source.vertices, target.vertices, config.kernel, alpha, control_points,
                                      config.integrator)
        result = register(problem, config.optim("registration"), label="register")

        write_momenta(out_dir / "momenta.csv", control_points, result.momenta)
        write_json(out_dir / "registration.json", {
            "source": Path(options["source"]).name,
            "target": Path(options["target"]).name,
            "alpha": alpha,
            "data_term": result.data_term,
            "reg_term": result.reg_term,
            "total_cost": result.total_cost,
            "geodesic_length": result.geodesic_length,
            "status": result.status,
            "iterations": result.iterations,
            "config_hash": config.config_hash,
        })
        style = self.style.SUCCESS if result.converged else self.style.WARNING
        self.stdout.write(style(
            f"Registered in {result.iterations} iterations ({result.status.value}): "
            f"data {result.data_term:.6g}, geodesic length {result.geodesic_length:.6g}"
        ))
