"""Shared mesh fixtures."""

from __future__ import annotations

import pytest

from tests.shapes import icosphere, unit_cube
from toothfuse.geometry import TriMesh


@pytest.fixture
def cube() -> TriMesh:
    return unit_cube()


@pytest.fixture
def sphere() -> TriMesh:
    return icosphere()
