from django.core.management.base import CommandError

from experiments.config import load_experiment_config
from experiments.management.base import ExperimentCommand
from experiments.runner import EXIT_DIVERGED, run_experiment
from lab.exceptions import ConfigError, DataFormatError


class Command(ExperimentCommand):
    help = "Run an experiment config: train, evaluate and write metrics, checkpoints and grids"
    command_name = "run"

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="INI experiment config, e.g. experiments/configs/toy2d_sgd.cfg")
        parser.add_argument("--seed", type=int, help="Master seed; overrides [experiment] seed")
        parser.add_argument("--out", help="Output directory; overrides [experiment] out")
        parser.add_argument("--workers", type=int, help="Trials to run in parallel")
        parser.add_argument(
            "--set",
            action="append",
            default=[],
            dest="overrides",
            metavar="SECTION.KEY=VALUE",
            help="Override one config value (repeatable)",
        )

    def handle(self, *args, **options):
        try:
            config = load_experiment_config(
                options["config"],
                overrides=options["overrides"],
                seed=options["seed"],
                out=options["out"],
                workers=options["workers"],
            )
            outcome = run_experiment(config)
        except (ConfigError, DataFormatError) as e:
            raise self.usage_error(e) from e

        if outcome.exit_code == EXIT_DIVERGED:
            raise CommandError(
                f"Run diverged, see {outcome.output_dir / 'metadata.json'}", returncode=EXIT_DIVERGED
            )

        for report in outcome.reports:
            self.stdout.write(
                f"{report.name}: {report.value:.6g} ± {report.standard_error:.3g} (n={report.n_trials})"
            )
        self.stdout.write(self.style.SUCCESS(f"Wrote {outcome.output_dir}"))
