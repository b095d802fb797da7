from django.core.management.base import BaseCommand, CommandError

from experiments.runner import EXIT_CONFIG_ERROR


class ExperimentCommand(BaseCommand):
    """Base for the lab commands: configuration problems print usage and exit with code 2."""

    command_name = None

    def usage_error(self, error):
        self.create_parser("manage.py", self.command_name).print_usage(self.stderr)
        return CommandError(f"Invalid configuration: {error}", returncode=EXIT_CONFIG_ERROR)
