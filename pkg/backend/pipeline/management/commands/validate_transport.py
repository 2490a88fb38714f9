from pipeline.management.base import PipelineCommand
from pipeline.validation import validate_transport


class Command(PipelineCommand):
    help = "Compares EF and area strain of the transported sequences with the originals"

    def run(self, config, options):
        table, report = validate_transport(config)
        self.stdout.write(f"{'metric':<8}{'original':>20}{'PT RMSE':>12}{'SPT RMSE':>12}")
        for row in table:
            original = f"{row['original_mean']:.3f} ± {row['original_std']:.3f}"
            self.stdout.write(f"{row['metric']:<8}{original:>20}{row['pt_rmse']:>12.4f}{row['spt_rmse']:>12.4f}")
        self.finish(report, "validation")
