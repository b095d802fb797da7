from django.core.exceptions import ValidationError

from evaluation.grids import DEFAULT_RESOLUTION
from experiments.management.base import ExperimentCommand
from experiments.runner import emit_grid
from lab.exceptions import DataFormatError, PreconditionError, ShapeError
from objectives.losses import NoiseModel
from utils import parse_range


class Command(ExperimentCommand):
    help = "Evaluate a checkpoint on a 2D grid and write the predictive CSV with its metadata sidecar"
    command_name = "emit_grid"

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True, help="Parameter (.bdk) or ensemble (.bdke) file")
        parser.add_argument("--out", required=True, help="Grid CSV to write")
        parser.add_argument("--range", default="-10:10", dest="x_range", help="x range as lo:hi")
        parser.add_argument("--y-range", dest="y_range", help="y range as lo:hi (defaults to --range)")
        parser.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION, help="Cells per axis")
        parser.add_argument("--noise-precision", type=float, help="Noise precision for mean-only regression models")

    def handle(self, *args, **options):
        try:
            x_range = parse_range(options["x_range"])
            y_range = parse_range(options["y_range"]) if options["y_range"] else None
            noise = NoiseModel(options["noise_precision"]) if options["noise_precision"] is not None else None
            path = emit_grid(
                options["checkpoint"],
                options["out"],
                x_range=x_range,
                y_range=y_range,
                resolution=options["resolution"],
                noise=noise,
            )
        except FileNotFoundError as e:
            raise self.usage_error(f"checkpoint {e.filename} not found") from e
        except ValidationError as e:
            raise self.usage_error(" ".join(e.messages)) from e
        except (DataFormatError, ShapeError, PreconditionError) as e:
            raise self.usage_error(e) from e

        self.stdout.write(self.style.SUCCESS(f"Wrote {path}"))
