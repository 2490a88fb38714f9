from pipeline.management.base import PipelineCommand
from pipeline.runner import run_pipeline


class Command(PipelineCommand):
    help = "Runs alignment, atlas, control points, scaled transport, spline fits and statistics"

    def run(self, config, options):
        self.stdout.write(f"Running pipeline (config {config.config_hash[:12]})...")
        report = run_pipeline(config)
        for stage, outcome in report.stages.items():
            self.stdout.write(f"{stage}: {outcome}")
        self.finish(report)
