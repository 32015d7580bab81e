"""Two-tower candidate generation lab.

Thin wrapper over the C++ core. Config objects are plain structs; `configure`
sets several fields at once. Reports come back as dicts with the keys kind,
seed, config_hash, config, metrics, flags, columns and rows (None marks a
missing cell).
"""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401


def configure(obj, **fields):
    """Set attributes on a config struct and return it; unknown names raise."""
    for name, value in fields.items():
        if not hasattr(obj, name):
            raise AttributeError(f"{type(obj).__name__} has no field {name!r}")
        setattr(obj, name, value)
    return obj


def column(report, name):
    """Values of one report column, None cells included."""
    i = report["columns"].index(name)
    return [row[i] for row in report["rows"]]
