"""Grid observation rendering, template-based coordinate recovery, and
the flat feature vector the neural policy consumes.

The grid view covers the 10x10-unit window centred on the scoring
target at 30x30 cells (1/3 unit per cell). Each visible stone is
stamped as a 3x3 block: 8 for the observing team's stones, 4 for the
opponent's. `extract_coordinates` inverts the stamping by exact
template search, which round-trips perfectly for non-overlapping
stones. The policy itself never consumes the grid; it gets the sorted,
normalized coordinate vector from `build_features`.
"""
from __future__ import annotations

import math

import numpy as np

from .sim import GameState, other_team

GRID_SIZE = 30
WINDOW_UNITS = 10.0
CELL_UNITS = WINDOW_UNITS / GRID_SIZE
OWN_CODE = 8
OPP_CODE = 4
SENTINEL = -1.0

FEATURE_LENGTH = 18


class ExtractionError(RuntimeError):
    """Template search produced more stone candidates than can exist."""


def _window_origin(state: GameState) -> tuple[float, float]:
    cx, cy = state.config.center_target
    return cx - WINDOW_UNITS / 2.0, cy - WINDOW_UNITS / 2.0


def render_observation(state: GameState, team: str) -> np.ndarray:
    """Stamp every in-play stone inside the window onto a 30x30 grid.

    A stone's 3x3 template is centred on the cell containing its
    centre; templates clip at the grid border. Stones whose centre
    falls outside the window are omitted. Opponent stones are stamped
    first so the observing team wins cell conflicts deterministically.
    """
    grid = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int64)
    ox, oy = _window_origin(state)
    in_play = state.in_play_stones()
    opp_first = [s for s in in_play if s.team != team] + [s for s in in_play if s.team == team]
    for stone in opp_first:
        col = math.floor((stone.x - ox) / CELL_UNITS)
        row = math.floor((stone.y - oy) / CELL_UNITS)
        if not (0 <= row < GRID_SIZE and 0 <= col < GRID_SIZE):
            continue
        code = OWN_CODE if stone.team == team else OPP_CODE
        r0, r1 = max(0, row - 1), min(GRID_SIZE, row + 2)
        c0, c1 = max(0, col - 1), min(GRID_SIZE, col + 2)
        grid[r0:r1, c0:c1] = code
    return grid


def grid_to_text(grid: np.ndarray) -> str:
    """Debug dump: 30 lines of 30 digits."""
    return "\n".join("".join(str(int(v)) for v in row) for row in grid)


def _template_matches(grid: np.ndarray, code: int) -> list[tuple[int, int, int]]:
    """All centres whose in-bounds 3x3 neighbourhood is entirely `code`.

    Returns (score, row, col) where score counts the compared cells
    (9 in the interior, fewer where the template clips the border).
    """
    hits = []
    for row in range(GRID_SIZE):
        for col in range(GRID_SIZE):
            if grid[row, col] != code:
                continue
            r0, r1 = max(0, row - 1), min(GRID_SIZE, row + 2)
            c0, c1 = max(0, col - 1), min(GRID_SIZE, col + 2)
            block = grid[r0:r1, c0:c1]
            if np.all(block == code):
                hits.append((block.size, row, col))
    return hits


def extract_coordinates(grid: np.ndarray) -> list[tuple[str, int, int]]:
    """Recover (team, cell_row, cell_col) stone detections from a grid.

    Exact template search for both codes, then non-maximum suppression:
    detections are taken best-score first (ties row-major) and any
    further detection of the same team within a 3x3 neighbourhood of an
    accepted one is dropped. More than 8 surviving detections means the
    grid cannot have come from a legal state.
    """
    detections: list[tuple[str, int, int]] = []
    for label, code in (("own", OWN_CODE), ("opp", OPP_CODE)):
        hits = _template_matches(grid, code)
        hits.sort(key=lambda h: (-h[0], h[1], h[2]))
        kept: list[tuple[int, int]] = []
        for _score, row, col in hits:
            if any(abs(row - kr) < 3 and abs(col - kc) < 3 for kr, kc in kept):
                continue
            kept.append((row, col))
        detections.extend((label, row, col) for row, col in kept)
    detections.sort(key=lambda d: (d[0] != "own", d[1], d[2]))
    if len(detections) > 8:
        raise ExtractionError(f"{len(detections)} stone candidates: {detections}")
    return detections


def build_features(state: GameState, team: str) -> np.ndarray:
    """18-float policy input: 4 own + 4 opponent stone slots, then counts.

    Stone slots hold (x, y) normalized by the field dimensions, own
    team first, each group sorted by distance to the target (ties by x
    then y); unused slots are the (-1, -1) sentinel. The last two
    entries are the remaining-throw counts scaled to [0, 1].
    """
    cfg = state.config
    cx, cy = cfg.center_target
    opp = other_team(team)
    groups = {team: [], opp: []}
    for s in state.in_play_stones():
        groups[s.team].append(s)

    out = np.full(FEATURE_LENGTH, SENTINEL, dtype=np.float64)
    idx = 0
    for group_team in (team, opp):
        stones = sorted(groups[group_team],
                        key=lambda s: (math.hypot(s.x - cx, s.y - cy), s.x, s.y))
        for s in stones[:4]:
            out[idx] = s.x / cfg.field_width
            out[idx + 1] = s.y / cfg.field_length
            idx += 2
        idx = 8 if group_team == team else 16
    out[16] = state.throws_left[team] / 4.0
    out[17] = state.throws_left[opp] / 4.0
    return out
