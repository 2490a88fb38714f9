from pipeline.management.base import PipelineCommand
from pipeline.runner import PipelineRun


class Command(PipelineCommand):
    help = "Runs the group comparisons, the lambda regression and the cohort summaries"

    def run(self, config, options):
        run = PipelineRun(config)
        report = run.run(("stats",))
        outcome = report.stages.get("stats", {})
        if "significant_blocks" in outcome:
            self.stdout.write(f"{outcome['significant_blocks']} significant blocks")
        self.finish(report, "stats")
