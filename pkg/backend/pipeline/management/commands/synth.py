from django.core.management.base import CommandError

from pipeline.management.base import PipelineCommand
from pipeline.runner import ExitStatus
from pipeline.synth import generate_cohort


class Command(PipelineCommand):
    help = "Generates a synthetic cohort with known momenta, forces and planted group signals"

    def run(self, config, options):
        out_dir = config.path("output")
        if out_dir is None:
            raise CommandError("give an output directory with --out", returncode=ExitStatus.USAGE)
        if config.seed is None:
            raise CommandError("synthetic cohorts need a seed (--seed or seed in the config)",
                               returncode=ExitStatus.USAGE)

        self.stdout.write(f"Generating cohort in {out_dir} (seed {config.seed})...")
        manifest, ground_truth = generate_cohort(config, out_dir, workers=config.workers or 1)
        for subject_id, truth in sorted(ground_truth["subjects"].items()):
            self.stdout.write(f"{subject_id}: {truth['group']}, EF {truth['ef']:.4f}, "
                              f"volume x{truth['volume_factor']:.3f}")
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(ground_truth['subjects'])} subjects; manifest at {manifest}"
        ))
