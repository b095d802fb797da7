"""Wire Django's test setup into pytest, mirroring `manage.py test`."""
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "lab.settings")
django.setup()

from django.test.utils import (  # noqa: E402
    setup_databases,
    setup_test_environment,
    teardown_databases,
    teardown_test_environment,
)

_db_config = None


def pytest_sessionstart(session):
    global _db_config
    setup_test_environment()
    _db_config = setup_databases(verbosity=0, interactive=False)


def pytest_sessionfinish(session, exitstatus):
    if _db_config is not None:
        teardown_databases(_db_config, verbosity=0)
    teardown_test_environment()


def pytest_pycollect_makeitem(collector, name, obj):
    # Library helpers such as evaluation.metrics.test_rmse are imported into
    # test modules; only collect functions defined in the module itself.
    import inspect

    if inspect.isfunction(obj) and isinstance(collector, __import__("pytest").Module):
        if obj.__module__ != collector.obj.__name__:
            return []
    return None
