"""
Reusable validators and file helpers for the lab.
The validators are shared by the experiment config serializer and the
management commands.
"""
import os
import re
import tempfile
from pathlib import Path

from django.core.validators import RegexValidator
from django.core.exceptions import ValidationError


# Architecture string, e.g. 2-10-10-2
architecture_validator = RegexValidator(
    regex=r'^\d+(-\d+)+$',
    message='Architecture must look like 2-10-2 (layer widths joined by dashes).',
    code='invalid_architecture'
)


def validate_positive_number(value):
    """Validate that a number is positive."""
    if value <= 0:
        raise ValidationError(
            f'{value} is not a positive number. Value must be greater than 0.',
            code='invalid_positive'
        )


def validate_non_negative(value):
    """Validate that a number is zero or positive."""
    if value < 0:
        raise ValidationError(
            f'{value} is negative. Value must be at least 0.',
            code='invalid_non_negative'
        )


def validate_decay_factor(value):
    """Validate a step-decay factor lies in (0, 1]."""
    if not 0 < value <= 1:
        raise ValidationError(
            f'Decay factor {value} must lie in (0, 1].',
            code='invalid_decay'
        )


def parse_architecture(value):
    """Turn '2-10-2' into (2, 10, 2)."""
    architecture_validator(value)
    widths = tuple(int(part) for part in value.split('-'))
    if any(width < 1 for width in widths):
        raise ValidationError(
            'Every layer width must be at least 1.',
            code='invalid_architecture'
        )
    return widths


def parse_range(value):
    """Turn 'lo:hi' into a float pair with lo < hi."""
    match = re.fullmatch(r'\s*(-?[\d.eE+-]+)\s*:\s*(-?[\d.eE+-]+)\s*', value)
    if not match:
        raise ValidationError(f'Range {value!r} must look like lo:hi.', code='invalid_range')
    try:
        lower, upper = float(match.group(1)), float(match.group(2))
    except ValueError:
        raise ValidationError(f'Range {value!r} must look like lo:hi.', code='invalid_range')
    if lower >= upper:
        raise ValidationError(
            f'Range lower bound {lower} must be below upper bound {upper}.',
            code='invalid_range'
        )
    return lower, upper


def atomic_write_bytes(path, payload):
    """Write a file once: write to a temp file next to it, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))
