from pipeline.management.base import PipelineCommand
from pipeline.runner import PipelineRun


class Command(PipelineCommand):
    help = "Runs scaled parallel transport of every subject onto the atlas"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--prepare",
            action="store_true",
            help="Run alignment, atlas estimation and control-point optimization first",
        )

    def run(self, config, options):
        stages = ("align", "atlas", "control_points", "transport") if options["prepare"] else ("transport",)
        self.finish(PipelineRun(config).run(stages), "transport")
