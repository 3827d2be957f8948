"""Decentralized turbine-governor damping control toolkit."""

__version__ = "0.1.0"

from importlib import resources


def bundled_case_text(name: str = "two_area") -> str:
    """Raw JSON of a case shipped with the package."""
    return resources.files("oscdamp.data").joinpath(f"{name}.json").read_text()
