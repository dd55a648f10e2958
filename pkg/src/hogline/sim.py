"""2D curling-style match engine: stone physics, scoring, and match flow.

The field is a ``field_width x field_length`` rectangle with the scoring
target near the far end. A throw places a stone on the near baseline
(y=0) with a single launch impulse; after that the stone glides under
constant friction, bouncing off walls and other stones until everything
is at rest. A match is two games of four throws per team with the serve
order swapped in game two; per-game points go to the team holding the
stones nearest the target (see `score_game`).

Every source of randomness is the per-throw delivery noise, which is
derived deterministically from the match seed and the throw ordinal, so
a fixed (config, seed, policy pair) replays to identical traces.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Protocol

import numpy as np


class ConfigError(ValueError):
    """A simulation config field is out of its legal range."""


class StateError(RuntimeError):
    """An operation was applied to a state in the wrong phase."""


class ActionError(ValueError):
    """A throw action referenced an index outside its grid."""


PHASE_AWAITING = "awaiting_throw"
PHASE_GLIDING = "stone_gliding"
PHASE_GAME_OVER = "game_over"
PHASE_MATCH_OVER = "match_over"

TEAMS = ("A", "B")

# Distance tolerance for "tied at the minimum" in scoring.
SCORE_TIE_EPS = 1e-9


def other_team(team: str) -> str:
    return "B" if team == "A" else "A"


@dataclass(frozen=True)
class SimConfig:
    """Physical constants, field geometry and the discrete action grids.

    ``house_radius=None`` means the unbounded scoring mode where every
    stone is eligible and only relative proximity matters.
    """

    field_width: float = 10.0
    field_length: float = 30.0
    center_target: tuple[float, float] = (5.0, 25.0)
    red_line_y: float = 9.0
    house_radius: Optional[float] = 3.0
    stone_radius: float = 0.35
    stone_mass: float = 1.0
    friction_decel: float = 0.25
    restitution_stone: float = 0.9
    restitution_wall: float = 0.7
    dt: float = 0.05
    rest_speed_eps: float = 0.05
    max_ticks_per_throw: int = 4000
    # Launch grids: lateral start, angle off the downfield axis, launch speed.
    x0_grid: tuple[float, ...] = (2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5)
    angle_grid_deg: tuple[float, ...] = (-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0)
    speed_grid: tuple[float, ...] = (3.0, 4.5, 6.0)
    # Seeded per-throw delivery noise (std devs); zero disables.
    throw_angle_noise: float = 0.01
    throw_speed_noise: float = 0.01

    def validate(self) -> None:
        for name in ("field_width", "field_length", "red_line_y", "stone_radius",
                     "stone_mass", "friction_decel", "dt", "rest_speed_eps"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise ConfigError(f"{name}: must be a finite number (got {value!r})")
        if self.field_width <= 0:
            raise ConfigError(f"field_width: must be > 0 (got {self.field_width})")
        if self.field_length <= 0:
            raise ConfigError(f"field_length: must be > 0 (got {self.field_length})")
        if self.stone_radius <= 0:
            raise ConfigError(f"stone_radius: must be > 0 (got {self.stone_radius})")
        if self.stone_mass <= 0:
            raise ConfigError(f"stone_mass: must be > 0 (got {self.stone_mass})")
        if self.friction_decel < 0:
            raise ConfigError(f"friction_decel: must be >= 0 (got {self.friction_decel})")
        if not 0 < self.restitution_stone <= 1:
            raise ConfigError(
                f"restitution_stone: restitution out of (0,1] (got {self.restitution_stone})")
        if not 0 < self.restitution_wall <= 1:
            raise ConfigError(
                f"restitution_wall: restitution out of (0,1] (got {self.restitution_wall})")
        if self.dt <= 0:
            raise ConfigError(f"dt: must be > 0 (got {self.dt})")
        if self.rest_speed_eps <= 0:
            raise ConfigError(f"rest_speed_eps: must be > 0 (got {self.rest_speed_eps})")
        if self.max_ticks_per_throw < 1:
            raise ConfigError(
                f"max_ticks_per_throw: must be >= 1 (got {self.max_ticks_per_throw})")
        cx, cy = self.center_target
        if not (0 < cx < self.field_width and 0 < cy < self.field_length):
            raise ConfigError(f"center_target: must lie inside the field (got {self.center_target})")
        if not 0 < self.red_line_y < cy:
            raise ConfigError(
                f"red_line_y: must satisfy 0 < red_line_y < center_target.y (got {self.red_line_y})")
        if self.house_radius is not None and self.house_radius <= 0:
            raise ConfigError(f"house_radius: must be > 0 or None (got {self.house_radius})")
        for name in ("x0_grid", "angle_grid_deg", "speed_grid"):
            grid = getattr(self, name)
            if len(grid) == 0:
                raise ConfigError(f"{name}: must not be empty")
        if any(s <= 0 for s in self.speed_grid):
            raise ConfigError(f"speed_grid: speeds must be > 0 (got {self.speed_grid})")
        if self.throw_angle_noise < 0 or self.throw_speed_noise < 0:
            raise ConfigError("throw_angle_noise/throw_speed_noise: must be >= 0")

    @property
    def n_actions(self) -> int:
        return len(self.x0_grid) * len(self.angle_grid_deg) * len(self.speed_grid)

    def config_hash(self) -> str:
        blob = json.dumps(
            {f.name: getattr(self, f.name) for f in fields(self)},
            sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class Stone:
    team: str
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    in_play: bool = True

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def copy(self) -> "Stone":
        return Stone(self.team, self.x, self.y, self.vx, self.vy, self.in_play)


@dataclass
class GameState:
    """Full state of a two-game match between teams A and B."""

    config: SimConfig
    stones: list[Stone] = field(default_factory=list)
    game_index: int = 1
    thrower: str = "A"
    first_thrower: str = "A"
    throws_left: dict[str, int] = field(default_factory=lambda: {"A": 4, "B": 4})
    phase: str = PHASE_AWAITING
    game_scores: list[tuple[Optional[str], int]] = field(default_factory=list)
    rng_seed: int = 0
    total_throws: int = 0

    def copy(self) -> "GameState":
        return GameState(
            config=self.config,
            stones=[s.copy() for s in self.stones],
            game_index=self.game_index,
            thrower=self.thrower,
            first_thrower=self.first_thrower,
            throws_left=dict(self.throws_left),
            phase=self.phase,
            game_scores=list(self.game_scores),
            rng_seed=self.rng_seed,
            total_throws=self.total_throws,
        )

    def in_play_stones(self) -> list[Stone]:
        return [s for s in self.stones if s.in_play]

    def match_totals(self) -> dict[str, int]:
        totals = {"A": 0, "B": 0}
        for winner, points in self.game_scores:
            if winner is not None:
                totals[winner] += points
        return totals


@dataclass(frozen=True)
class ThrowAction:
    x0_index: int
    angle_index: int
    speed_index: int

    def validate(self, config: SimConfig) -> None:
        if not 0 <= self.x0_index < len(config.x0_grid):
            raise ActionError(f"x0_index {self.x0_index} outside grid of {len(config.x0_grid)}")
        if not 0 <= self.angle_index < len(config.angle_grid_deg):
            raise ActionError(
                f"angle_index {self.angle_index} outside grid of {len(config.angle_grid_deg)}")
        if not 0 <= self.speed_index < len(config.speed_grid):
            raise ActionError(
                f"speed_index {self.speed_index} outside grid of {len(config.speed_grid)}")

    def values(self, config: SimConfig) -> tuple[float, float, float]:
        """Nominal (x0, angle_deg, speed) the indices point at."""
        return (config.x0_grid[self.x0_index],
                config.angle_grid_deg[self.angle_index],
                config.speed_grid[self.speed_index])


@dataclass
class ThrowOutcome:
    launch: tuple[float, float, float]  # actual (x0, angle_rad, speed) after noise
    collisions: list[tuple[int, str, int, int]]  # (tick, "stone"|"wall", i, j or -1)
    ticks: int
    tick_budget_exhausted: bool = False


class Policy(Protocol):
    def decide(self, state: GameState) -> ThrowAction: ...


def new_match(config: SimConfig, seed: int) -> GameState:
    """Fresh match state: empty field, game 1, team A to throw."""
    config.validate()
    return GameState(config=config, rng_seed=int(seed))


def _throw_rng(seed: int, throw_ordinal: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, throw_ordinal])))


def simulate_to_rest(stones: list[Stone], config: SimConfig,
                     check_invariants: bool = False) -> tuple[list[tuple[int, str, int, int]], int, bool]:
    """Tick the stones until all are at rest or the tick budget runs out.

    Mutates the stones in place. Returns (collision events, ticks used,
    budget_exhausted); on exhaustion the stones keep their last
    velocities and the caller decides how to stop them. Integration is
    semi-implicit Euler: friction is
    applied to velocities first, positions advance with the new
    velocities, then contacts are resolved by impulses plus positional
    de-penetration.

    With ``check_invariants`` the per-tick conservation checks run:
    kinetic energy must not increase, stone-stone impulses must conserve
    momentum along the line of centers, and no resolved pair may overlap
    by more than 1e-6.
    """
    n = len(stones)
    if n == 0:
        return [], 0, False
    x = [s.x for s in stones]
    y = [s.y for s in stones]
    vx = [s.vx for s in stones]
    vy = [s.vy for s in stones]
    live = [s.in_play for s in stones]

    dt = config.dt
    mu_dt = config.friction_decel * dt
    eps = config.rest_speed_eps
    r = config.stone_radius
    two_r = 2.0 * r
    two_r2 = two_r * two_r
    e_stone = config.restitution_stone
    e_wall = config.restitution_wall
    w = config.field_width
    length = config.field_length

    events: list[tuple[int, str, int, int]] = []
    ticks = 0
    exhausted = False

    for tick in range(config.max_ticks_per_throw):
        ticks = tick + 1
        if check_invariants:
            ke_before = sum(vx[i] * vx[i] + vy[i] * vy[i] for i in range(n) if live[i])

        # Friction on velocities, then clamp sub-threshold speeds to exact rest.
        moving = False
        for i in range(n):
            if not live[i]:
                continue
            sx, sy = vx[i], vy[i]
            if sx == 0.0 and sy == 0.0:
                continue
            sp = math.hypot(sx, sy)
            ns = sp - mu_dt
            if ns <= 0.0 or sp < eps:
                vx[i] = 0.0
                vy[i] = 0.0
                continue
            scale = ns / sp
            vx[i] = sx * scale
            vy[i] = sy * scale
            moving = True

        if not moving:
            ticks = tick
            break

        for i in range(n):
            if live[i] and (vx[i] != 0.0 or vy[i] != 0.0):
                x[i] += vx[i] * dt
                y[i] += vy[i] * dt

        # Contact resolution; repeat while anything was touching.
        for _pass in range(8):
            contact = False
            for i in range(n - 1):
                if not live[i]:
                    continue
                for j in range(i + 1, n):
                    if not live[j]:
                        continue
                    dx = x[j] - x[i]
                    dy = y[j] - y[i]
                    d2 = dx * dx + dy * dy
                    if d2 >= two_r2:
                        continue
                    contact = True
                    d = math.sqrt(d2)
                    if d > 1e-12:
                        nx, ny = dx / d, dy / d
                    else:
                        nx, ny = 1.0, 0.0
                    vn = (vx[j] - vx[i]) * nx + (vy[j] - vy[i]) * ny
                    if vn < 0.0:
                        if check_invariants:
                            p_before = (vx[i] * nx + vy[i] * ny) + (vx[j] * nx + vy[j] * ny)
                        # Equal masses: each stone picks up half the impulse.
                        half_imp = -(1.0 + e_stone) * vn * 0.5
                        vx[i] -= half_imp * nx
                        vy[i] -= half_imp * ny
                        vx[j] += half_imp * nx
                        vy[j] += half_imp * ny
                        if check_invariants:
                            p_after = (vx[i] * nx + vy[i] * ny) + (vx[j] * nx + vy[j] * ny)
                            assert abs(p_after - p_before) <= 1e-9, "momentum drift in collision"
                        events.append((tick, "stone", i, j))
                    half_sep = 0.5 * (two_r - d) + 1e-12
                    x[i] -= half_sep * nx
                    y[i] -= half_sep * ny
                    x[j] += half_sep * nx
                    y[j] += half_sep * ny
            for i in range(n):
                if not live[i]:
                    continue
                if x[i] < r and vx[i] < 0.0:
                    vx[i] = -e_wall * vx[i]
                    x[i] = r
                    contact = True
                    events.append((tick, "wall", i, -1))
                elif x[i] > w - r and vx[i] > 0.0:
                    vx[i] = -e_wall * vx[i]
                    x[i] = w - r
                    contact = True
                    events.append((tick, "wall", i, -1))
                if y[i] < r and vy[i] < 0.0:
                    vy[i] = -e_wall * vy[i]
                    y[i] = r
                    contact = True
                    events.append((tick, "wall", i, -1))
                elif y[i] > length - r and vy[i] > 0.0:
                    vy[i] = -e_wall * vy[i]
                    y[i] = length - r
                    contact = True
                    events.append((tick, "wall", i, -1))
            if not contact:
                break

        # Safety net: anything that escaped the walls is out of play.
        for i in range(n):
            if live[i] and not (-two_r <= x[i] <= w + two_r and -two_r <= y[i] <= length + two_r):
                live[i] = False
                vx[i] = 0.0
                vy[i] = 0.0

        if check_invariants:
            ke_after = sum(vx[i] * vx[i] + vy[i] * vy[i] for i in range(n) if live[i])
            assert ke_after <= ke_before + 1e-9, "kinetic energy increased in a tick"
            for i in range(n - 1):
                if not live[i]:
                    continue
                for j in range(i + 1, n):
                    if not live[j]:
                        continue
                    gap2 = (x[j] - x[i]) ** 2 + (y[j] - y[i]) ** 2
                    assert gap2 >= (two_r - 1e-6) ** 2, "stones overlap after resolution"
    else:
        exhausted = True

    for i, s in enumerate(stones):
        s.x, s.y, s.vx, s.vy, s.in_play = x[i], y[i], vx[i], vy[i], live[i]
    return events, ticks, exhausted


def execute_throw(state: GameState, action: ThrowAction,
                  check_invariants: bool = False) -> tuple[GameState, ThrowOutcome]:
    """Launch one stone for the current thrower and settle the field.

    Returns a new state; the input state is untouched. The launch picks
    up the seeded delivery noise for this throw ordinal, so replaying a
    match from the same seed reproduces every trajectory.
    """
    if state.phase != PHASE_AWAITING:
        raise StateError(f"cannot throw in phase {state.phase!r}")
    cfg = state.config
    action.validate(cfg)
    team = state.thrower
    if state.throws_left[team] <= 0:
        raise StateError(f"team {team} has no throws left")

    x0, angle_deg, speed = action.values(cfg)
    angle = math.radians(angle_deg)
    if cfg.throw_angle_noise > 0 or cfg.throw_speed_noise > 0:
        rng = _throw_rng(state.rng_seed, state.total_throws)
        angle += cfg.throw_angle_noise * rng.standard_normal()
        speed *= 1.0 + cfg.throw_speed_noise * rng.standard_normal()
        speed = max(speed, 0.1)

    nxt = state.copy()
    nxt.phase = PHASE_GLIDING
    nxt.stones.append(Stone(team=team, x=x0, y=0.0,
                            vx=speed * math.sin(angle), vy=speed * math.cos(angle)))
    events, ticks, exhausted = simulate_to_rest(nxt.stones, cfg, check_invariants)
    if exhausted:
        # Forcibly stop everything so the match can proceed.
        for s in nxt.stones:
            s.vx = 0.0
            s.vy = 0.0

    nxt.throws_left[team] -= 1
    nxt.total_throws += 1
    nxt.thrower = other_team(team)
    nxt.phase = PHASE_AWAITING

    if nxt.throws_left["A"] == 0 and nxt.throws_left["B"] == 0:
        nxt.phase = PHASE_GAME_OVER
        nxt.game_scores.append(score_game(nxt.stones, cfg))
        if nxt.game_index == 1:
            # Game 2 opens with the team that threw second in game 1.
            nxt.game_index = 2
            nxt.stones = []
            nxt.throws_left = {"A": 4, "B": 4}
            nxt.thrower = other_team(nxt.first_thrower)
            nxt.phase = PHASE_AWAITING
        else:
            nxt.phase = PHASE_MATCH_OVER

    outcome = ThrowOutcome(launch=(x0, angle, speed), collisions=events,
                           ticks=ticks, tick_budget_exhausted=exhausted)
    return nxt, outcome


def score_game(stones: list[Stone], config: SimConfig) -> tuple[Optional[str], int]:
    """Score a settled field.

    Eligible stones are the in-play ones within ``house_radius`` of the
    target (all of them when the house is unbounded). The team with the
    single nearest eligible stone wins the game and earns one point per
    eligible stone strictly nearer than the opponent's best; a tie at
    the minimum within 1e-9 scores zero for both.
    """
    house = config.house_radius if config.house_radius is not None else math.inf
    cx, cy = config.center_target
    dists: dict[str, list[float]] = {"A": [], "B": []}
    for s in stones:
        if not s.in_play:
            continue
        d = math.hypot(s.x - cx, s.y - cy)
        if d <= house:
            dists[s.team].append(d)
    best_a = min(dists["A"], default=math.inf)
    best_b = min(dists["B"], default=math.inf)
    if math.isinf(best_a) and math.isinf(best_b):
        return None, 0
    if abs(best_a - best_b) <= SCORE_TIE_EPS:
        return None, 0
    winner = "A" if best_a < best_b else "B"
    opp_best = best_b if winner == "A" else best_a
    points = sum(1 for d in dists[winner] if d < opp_best)
    return winner, points


@dataclass
class ThrowRecord:
    game: int
    idx: int
    team: str
    action: tuple[float, float, float]  # nominal (x0, angle_deg, speed)
    stones_after: list[tuple[str, float, float]]
    score_after: dict[str, int]


@dataclass
class MatchTrace:
    """Per-throw record of a match, serializable to byte-stable JSON."""

    seed: int
    config_hash: str
    throws: list[ThrowRecord]
    result: dict[str, int]
    winner: Optional[str]
    failed: bool = False
    failure: Optional[str] = None
    labels: dict[str, str] = field(default_factory=lambda: {"A": "A", "B": "B"})

    def margin(self) -> int:
        return abs(self.result["A"] - self.result["B"])

    def to_json(self) -> str:
        out = ['{"meta": {"seed": %d, "config_hash": "%s"}, "throws": [' % (self.seed, self.config_hash)]
        rows = []
        for t in self.throws:
            stones = ", ".join(
                '{"team": "%s", "x": %.6f, "y": %.6f}' % s for s in t.stones_after)
            rows.append(
                '{"game": %d, "idx": %d, "team": "%s", '
                '"action": {"x0": %.6f, "angle": %.6f, "speed": %.6f}, '
                '"stones_after": [%s], "score_after": {"A": %d, "B": %d}}'
                % (t.game, t.idx, t.team, t.action[0], t.action[1], t.action[2],
                   stones, t.score_after["A"], t.score_after["B"]))
        out.append(", ".join(rows))
        winner = '"%s"' % self.winner if self.winner else "null"
        tail = '], "result": {"A": %d, "B": %d, "winner": %s' % (
            self.result["A"], self.result["B"], winner)
        if self.failed:
            tail += ', "failure": "%s"' % (self.failure or "unknown")
        tail += "}}"
        out.append(tail)
        return "".join(out)

    @classmethod
    def from_json(cls, text: str) -> "MatchTrace":
        doc = json.loads(text)
        throws = [
            ThrowRecord(
                game=t["game"], idx=t["idx"], team=t["team"],
                action=(t["action"]["x0"], t["action"]["angle"], t["action"]["speed"]),
                stones_after=[(s["team"], s["x"], s["y"]) for s in t["stones_after"]],
                score_after=dict(t["score_after"]),
            )
            for t in doc["throws"]
        ]
        result = doc["result"]
        return cls(
            seed=doc["meta"]["seed"], config_hash=doc["meta"]["config_hash"],
            throws=throws, result={"A": result["A"], "B": result["B"]},
            winner=result.get("winner"),
            failed="failure" in result, failure=result.get("failure"),
        )


def run_match(policy_a: Policy, policy_b: Policy, config: SimConfig, seed: int,
              labels: tuple[str, str] = ("A", "B")) -> MatchTrace:
    """Play a full two-game match; `policy_a` is team A (serves first in game 1).

    A policy that raises (or emits an out-of-grid action) forfeits: the
    match aborts with the partial trace flagged, which is how a broken
    generated tree surfaces without crashing the harness.
    """
    state = new_match(config, seed)
    policies = {"A": policy_a, "B": policy_b}
    throws: list[ThrowRecord] = []
    failed = False
    failure = None
    forfeiter: Optional[str] = None

    while state.phase == PHASE_AWAITING:
        team = state.thrower
        game = state.game_index
        idx = 8 - state.throws_left["A"] - state.throws_left["B"]
        try:
            action = policies[team].decide(state)
            state, _ = execute_throw(state, action)
        except Exception as exc:  # noqa: BLE001 - any policy fault forfeits
            failed = True
            forfeiter = team
            failure = f"policy {labels[0] if team == 'A' else labels[1]} ({team}): {exc}"
            break
        throws.append(ThrowRecord(
            game=game, idx=idx, team=team,
            action=action.values(config),
            stones_after=[(s.team, s.x, s.y) for s in state.stones if s.in_play],
            score_after=state.match_totals(),
        ))

    totals = state.match_totals()
    if failed:
        winner = other_team(forfeiter) if forfeiter else None
    elif totals["A"] > totals["B"]:
        winner = "A"
    elif totals["B"] > totals["A"]:
        winner = "B"
    else:
        winner = None
    return MatchTrace(seed=seed, config_hash=config.config_hash(), throws=throws,
                      result=totals, winner=winner, failed=failed, failure=failure,
                      labels={"A": labels[0], "B": labels[1]})
