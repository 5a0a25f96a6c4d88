import os
import sys

import numpy as np
from hypothesis import settings

from lifeloop.world import CellState, SemObject, SensorSpec, World

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("lifeloop", deadline=None, max_examples=25)
settings.load_profile("lifeloop")


def box_world(h: int = 16, w: int = 16, objects=(), sensor: SensorSpec | None = None, walls=()) -> World:
    """Border-walled open room; ``walls`` are extra (row, col) WALL cells."""
    grid = np.full((h, w), CellState.FREE, dtype=np.uint8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = CellState.WALL
    for r, c in walls:
        grid[r, c] = CellState.WALL
    return World(grid, list(objects), sensor or SensorSpec())


def obj(i, cls, center, radius=0.15, color="red", mass=0.2, active=0) -> SemObject:
    return SemObject(i, cls, color, center, radius, mass, active)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
