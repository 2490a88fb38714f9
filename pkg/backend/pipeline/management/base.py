from django.core.management.base import BaseCommand, CommandError

from geometry.exceptions import SystoleError
from pipeline.config import ConfigError, load_config
from pipeline.runner import ExitStatus


class PipelineCommand(BaseCommand):
    """
    Shared flags and exit codes: 1 for usage, config and missing-dependency
    errors, 2 when some subjects failed, 3 when all of them did.
    """

    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Experiment config file (TOML)")
        parser.add_argument("--manifest", help="Cohort manifest CSV; overrides the config")
        parser.add_argument("--out", help="Output directory; overrides the config")
        parser.add_argument("--seed", type=int, help="Random seed; overrides the config")
        parser.add_argument("--workers", type=int, help="Subject-level worker count")

    def load_config(self, options):
        if options.get("workers") is not None and options["workers"] < 1:
            raise CommandError("--workers must be at least 1", returncode=ExitStatus.USAGE)
        config = load_config(options["config"])
        return config.with_overrides(
            manifest=options.get("manifest"),
            output=options.get("out"),
            seed=options.get("seed"),
            workers=options.get("workers"),
        )

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
            self.run(config, options)
        except ConfigError as error:
            self.stderr.write(self.style.ERROR(str(error)))
            for line in error.lines():
                self.stderr.write(self.style.ERROR(f"  {line}"))
            raise CommandError("invalid configuration", returncode=ExitStatus.USAGE) from error
        except (SystoleError, OSError) as error:
            raise CommandError(str(error), returncode=ExitStatus.USAGE) from error

    def run(self, config, options):
        raise NotImplementedError

    def finish(self, report, what="pipeline"):
        """Print the outcome of a runner report and exit 2 or 3 on subject failures."""
        if report.exit_status == ExitStatus.OK:
            self.stdout.write(self.style.SUCCESS(f"{what}: {len(report.subjects)} subjects done"))
            return
        for line in report.failure_lines():
            self.stderr.write(self.style.ERROR(line))
        message = f"{what}: {len(report.failures)} of {len(report.subjects)} subjects failed"
        raise CommandError(message, returncode=report.exit_status)
