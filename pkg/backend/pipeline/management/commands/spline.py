from pipeline.management.base import PipelineCommand
from pipeline.runner import PipelineRun


class Command(PipelineCommand):
    help = "Fits the spline model to every transported systolic sequence"

    def run(self, config, options):
        self.finish(PipelineRun(config).run(("spline",)), "spline")
