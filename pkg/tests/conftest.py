import os
import sys
import textwrap

import pytest

# Modules import each other by bare name, as when started from app/.
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "app"))

from paths import SeedSpec  # noqa: E402


@pytest.fixture
def seed():
    return SeedSpec(20240611)


@pytest.fixture
def write_config(tmp_path):
    """Write a TOML run config into tmp_path and return its path."""
    def write(body, name="run.toml"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(body).lstrip(), encoding="utf-8")
        return path
    return write
