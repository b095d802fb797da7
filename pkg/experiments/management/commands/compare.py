from django.core.management.base import CommandError

from experiments.compare import compare_runs, parse_run_arguments, write_comparison_csv
from experiments.management.base import ExperimentCommand
from experiments.runner import EXIT_ASSERTION_FAILED
from lab.exceptions import ConfigError, DataFormatError, PreconditionError


class Command(ExperimentCommand):
    help = "Compare the metrics of finished runs and check assertions such as 'sgld.test_loglik > sgd.test_loglik'"
    command_name = "compare"

    def add_arguments(self, parser):
        parser.add_argument("runs", nargs="+", metavar="LABEL=PATH", help="Run directory or metrics.csv, optionally labelled")
        parser.add_argument(
            "--assert",
            action="append",
            default=[],
            dest="assertions",
            metavar="EXPR",
            help="Comparison over label.metric terms (repeatable)",
        )
        parser.add_argument("--csv", help="Also write the comparison table to this CSV")

    def handle(self, *args, **options):
        try:
            comparison = compare_runs(parse_run_arguments(options["runs"]))
            results = comparison.check(options["assertions"])
        except (ConfigError, DataFormatError, PreconditionError) as e:
            raise self.usage_error(e) from e

        self.stdout.write(comparison.to_text())
        if options["csv"]:
            write_comparison_csv(options["csv"], comparison)

        for result in results:
            style = self.style.SUCCESS if result.passed else self.style.ERROR
            self.stdout.write(style(result.describe()))

        failed = [result for result in results if not result.passed]
        if failed:
            raise CommandError(
                f"{len(failed)} of {len(results)} assertion(s) failed", returncode=EXIT_ASSERTION_FAILED
            )
