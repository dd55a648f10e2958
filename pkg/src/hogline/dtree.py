"""Sandboxed decision-tree policy language.

Trees are JSON documents: a map of nodes where conditions compare one
of nine derived game features against a constant and leaves name a shot
(draw / hit / guard). `decide` walks the tree and resolves the chosen
shot to a concrete grid action through the aiming solver, so no
generated tree ever executes anything but comparisons. The closed
feature set keeps critic output checkable; richer geometry is out of
scope on purpose.

Feature glossary (all numeric; distances in field units):

- ``own_nearest_dist_to_center`` / ``opp_nearest_dist_to_center``:
  distance of that team's closest in-play stone to the target;
  +infinity when the team has no stones down.
- ``own_stones_in_house`` / ``opp_stones_in_house``: count of in-play
  stones within the house radius (every stone when unbounded).
- ``own_throws_left`` / ``opp_throws_left``: remaining throws this game.
- ``is_last_throw``: 1 when this is the deciding team's final throw of
  the current game, else 0.
- ``game_index``: 1 or 2.
- ``center_occupied_by``: which team holds the in-house stone nearest
  the target: 0 none, 1 us, 2 opponent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

from .sim import GameState, SimConfig, ThrowAction, other_team

FEATURES = (
    "opp_nearest_dist_to_center",
    "own_nearest_dist_to_center",
    "opp_stones_in_house",
    "own_stones_in_house",
    "own_throws_left",
    "opp_throws_left",
    "is_last_throw",
    "game_index",
    "center_occupied_by",
)

COMPARATORS = ("<", "<=", "=", ">=", ">")
_COMPARATOR_ALIASES = {"≤": "<=", "≥": ">=", "==": "="}

SHOT_KINDS = ("draw", "hit", "guard")
SPEED_HINTS = ("slow", "medium", "fast")
HIT_SELECTOR = "opp_nearest_to_center"

MAX_DEPTH = 32
GUARD_SHORT_BY = 2.0
_EQ_EPS = 1e-9

CENTER_NONE, CENTER_OWN, CENTER_OPP = 0, 1, 2


class TreeParseError(ValueError):
    """Invalid tree document; `diagnostics` lists every problem found."""

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Shot:
    kind: str
    target: Optional[tuple[float, float]] = None
    select: Optional[str] = None
    speed_hint: Optional[str] = None


@dataclass(frozen=True)
class Condition:
    feature: str
    comparator: str
    constant: float
    true_branch: str
    false_branch: str


@dataclass(frozen=True)
class Leaf:
    shot: Shot


Node = Union[Condition, Leaf]


@dataclass
class DecisionTreeSpec:
    name: str
    comment: str
    root: str
    nodes: dict[str, Node] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Parsing and validation

def parse_tree(text: str, config: Optional[SimConfig] = None) -> DecisionTreeSpec:
    """Parse and validate a tree document; raises TreeParseError with the
    full diagnostic list (node ids and reasons) on any defect."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TreeParseError([f"syntax error: {exc}"]) from exc
    return tree_from_doc(doc, config)


def tree_from_doc(doc: object, config: Optional[SimConfig] = None) -> DecisionTreeSpec:
    cfg = config or SimConfig()
    diags: list[str] = []
    if not isinstance(doc, dict):
        raise TreeParseError(["document: top level must be a JSON object"])
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, dict) or not raw_nodes:
        raise TreeParseError(["nodes: must be a non-empty object of node definitions"])
    root = doc.get("root")
    if not isinstance(root, str) or root not in raw_nodes:
        raise TreeParseError([f"root: {root!r} is not a defined node id"])

    nodes: dict[str, Node] = {}
    for node_id, raw in raw_nodes.items():
        if not isinstance(raw, dict):
            diags.append(f"node {node_id}: must be an object")
            continue
        kind = raw.get("type")
        if kind == "condition":
            node = _parse_condition(node_id, raw, raw_nodes, diags)
        elif kind == "leaf":
            node = _parse_leaf(node_id, raw, cfg, diags)
        else:
            diags.append(f"node {node_id}: unknown type {kind!r} (want condition|leaf)")
            node = None
        if node is not None:
            nodes[node_id] = node

    if not diags:
        diags.extend(_check_tree_shape(root, nodes))
    if diags:
        raise TreeParseError(diags)
    return DecisionTreeSpec(
        name=str(doc.get("name", "")), comment=str(doc.get("comment", "")),
        root=root, nodes=nodes)


def _parse_condition(node_id: str, raw: dict, raw_nodes: dict, diags: list[str]) -> Optional[Condition]:
    ok = True
    feature = raw.get("feature")
    if feature not in FEATURES:
        diags.append(f"node {node_id}: unknown feature {feature!r}")
        ok = False
    comparator = _COMPARATOR_ALIASES.get(raw.get("comparator"), raw.get("comparator"))
    if comparator not in COMPARATORS:
        diags.append(f"node {node_id}: unknown comparator {raw.get('comparator')!r}")
        ok = False
    constant = raw.get("constant")
    if not isinstance(constant, (int, float)) or isinstance(constant, bool) or not math.isfinite(constant):
        diags.append(f"node {node_id}: constant must be a finite number (got {constant!r})")
        ok = False
    for branch in ("true_branch", "false_branch"):
        target = raw.get(branch)
        if not isinstance(target, str) or target not in raw_nodes:
            diags.append(f"node {node_id}: dangling branch {branch}={target!r}")
            ok = False
    if not ok:
        return None
    return Condition(feature=feature, comparator=comparator, constant=float(constant),
                     true_branch=raw["true_branch"], false_branch=raw["false_branch"])


def _parse_leaf(node_id: str, raw: dict, cfg: SimConfig, diags: list[str]) -> Optional[Leaf]:
    shot = raw.get("shot")
    if not isinstance(shot, dict):
        diags.append(f"node {node_id}: leaf needs a shot object")
        return None
    kind = shot.get("kind")
    if kind not in SHOT_KINDS:
        diags.append(f"node {node_id}: unknown shot kind {kind!r}")
        return None
    hint = shot.get("speed_hint")
    if hint is not None and hint not in SPEED_HINTS:
        diags.append(f"node {node_id}: unknown speed_hint {hint!r}")
        return None
    target = None
    select = None
    if kind in ("draw", "guard"):
        raw_target = shot.get("target")
        if (not isinstance(raw_target, (list, tuple)) or len(raw_target) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           and math.isfinite(v) for v in raw_target)):
            diags.append(f"node {node_id}: {kind} target must be [x, y] numbers")
            return None
        tx, ty = float(raw_target[0]), float(raw_target[1])
        if not (0 <= tx <= cfg.field_width and 0 < ty <= cfg.field_length):
            diags.append(f"node {node_id}: target ({tx}, {ty}) outside the field")
            return None
        target = (tx, ty)
    else:  # hit
        select = shot.get("select", HIT_SELECTOR)
        if select != HIT_SELECTOR:
            diags.append(f"node {node_id}: unknown hit selector {select!r}")
            return None
    return Leaf(Shot(kind=kind, target=target, select=select, speed_hint=hint))


def _check_tree_shape(root: str, nodes: dict[str, Node]) -> list[str]:
    """Every node reachable exactly once from the root, depth capped."""
    diags = []
    seen: dict[str, int] = {}
    max_depth = 0

    stack = [(root, 1)]
    while stack:
        node_id, depth = stack.pop()
        if node_id in seen:
            seen[node_id] += 1
            continue
        seen[node_id] = 1
        max_depth = max(max_depth, depth)
        node = nodes[node_id]
        if isinstance(node, Condition):
            stack.append((node.true_branch, depth + 1))
            stack.append((node.false_branch, depth + 1))

    for node_id, count in seen.items():
        if count > 1:
            diags.append(f"node {node_id}: reached by more than one branch (cycle or shared subtree)")
    for node_id in nodes:
        if node_id not in seen:
            diags.append(f"node {node_id}: unreachable from root")
    if max_depth > MAX_DEPTH:
        diags.append(f"tree depth {max_depth} exceeds the cap of {MAX_DEPTH}")
    return diags


def serialize_tree(spec: DecisionTreeSpec) -> str:
    """Tree back to its JSON document form (stable key order)."""
    nodes = {}
    for node_id, node in spec.nodes.items():
        if isinstance(node, Condition):
            nodes[node_id] = {
                "type": "condition", "feature": node.feature,
                "comparator": node.comparator, "constant": node.constant,
                "true_branch": node.true_branch, "false_branch": node.false_branch,
            }
        else:
            shot: dict = {"kind": node.shot.kind}
            if node.shot.target is not None:
                shot["target"] = list(node.shot.target)
            if node.shot.select is not None:
                shot["select"] = node.shot.select
            if node.shot.speed_hint is not None:
                shot["speed_hint"] = node.shot.speed_hint
            nodes[node_id] = {"type": "leaf", "shot": shot}
    doc = {"name": spec.name, "comment": spec.comment, "root": spec.root, "nodes": nodes}
    return json.dumps(doc, indent=2, sort_keys=False)


# ---------------------------------------------------------------------------
# Semantics

def compute_features(state: GameState, team: str) -> dict[str, float]:
    cfg = state.config
    cx, cy = cfg.center_target
    house = cfg.house_radius if cfg.house_radius is not None else math.inf
    opp = other_team(team)

    nearest = {team: math.inf, opp: math.inf}
    in_house = {team: 0, opp: 0}
    house_best: tuple[float, Optional[str]] = (math.inf, None)
    for s in state.in_play_stones():
        d = math.hypot(s.x - cx, s.y - cy)
        if d < nearest[s.team]:
            nearest[s.team] = d
        if d <= house:
            in_house[s.team] += 1
            if d < house_best[0] - _EQ_EPS:
                house_best = (d, s.team)
            elif abs(d - house_best[0]) <= _EQ_EPS and house_best[1] != s.team:
                house_best = (d, None)  # dead-even: nobody holds the center

    if house_best[1] == team:
        center_occupied = CENTER_OWN
    elif house_best[1] == opp:
        center_occupied = CENTER_OPP
    else:
        center_occupied = CENTER_NONE

    return {
        "opp_nearest_dist_to_center": nearest[opp],
        "own_nearest_dist_to_center": nearest[team],
        "opp_stones_in_house": float(in_house[opp]),
        "own_stones_in_house": float(in_house[team]),
        "own_throws_left": float(state.throws_left[team]),
        "opp_throws_left": float(state.throws_left[opp]),
        "is_last_throw": 1.0 if state.throws_left[team] == 1 else 0.0,
        "game_index": float(state.game_index),
        "center_occupied_by": float(center_occupied),
    }


def _compare(value: float, comparator: str, constant: float) -> bool:
    if comparator == "<":
        return value < constant
    if comparator == "<=":
        return value <= constant
    if comparator == "=":
        return abs(value - constant) <= _EQ_EPS
    if comparator == ">=":
        return value >= constant
    return value > constant


def _landing_range(v: float, mu: float, room_ahead: float, wall_e: float) -> float:
    """Where along the aim line a stone launched at speed v comes to rest,
    folding its path at the far wall (and back at the near wall)."""
    if mu <= 0:
        return math.inf
    v2 = v * v
    pos = 0.0
    forward = True
    for _ in range(6):
        stop = v2 / (2.0 * mu)
        room = (room_ahead - pos) if forward else pos
        if stop <= room:
            return pos + stop if forward else pos - stop
        v2 = (v2 - 2.0 * mu * room) * wall_e * wall_e
        pos = room_ahead if forward else 0.0
        forward = not forward
    return pos


def _aim(cfg: SimConfig, target: tuple[float, float], speed_rule: str,
         speed_hint: Optional[str]) -> ThrowAction:
    """Grid action whose straight launch line best crosses the target.

    Lateral placement and angle are searched jointly for minimal miss at
    the target range (ties toward smaller indices). Speed selection:
    ``landing`` matches the wall-aware resting range (draws finish at
    the target even when that takes a back-wall rebound); ``stop_short``
    matches the plain friction stopping distance (guards must never
    reach the wall); ``fast`` takes the top of the grid.
    """
    tx, ty = target
    best = None
    for xi, x0 in enumerate(cfg.x0_grid):
        for ai, adeg in enumerate(cfg.angle_grid_deg):
            miss = abs(x0 + math.tan(math.radians(adeg)) * ty - tx)
            key = (miss, xi, ai)
            if best is None or key < best:
                best = key
    _, xi, ai = best
    x0 = cfg.x0_grid[xi]
    rng_to_target = math.hypot(tx - x0, ty)

    if speed_hint is not None:
        si = {"slow": 0, "medium": len(cfg.speed_grid) // 2,
              "fast": len(cfg.speed_grid) - 1}[speed_hint]
    elif speed_rule == "fast":
        si = len(cfg.speed_grid) - 1
    else:
        cos_a = math.cos(math.radians(cfg.angle_grid_deg[ai]))
        room = max((cfg.field_length - cfg.stone_radius) / max(cos_a, 1e-6), rng_to_target)
        best_s = None
        for i, v in enumerate(cfg.speed_grid):
            if speed_rule == "landing":
                reach = _landing_range(v, cfg.friction_decel, room, cfg.restitution_wall)
            else:  # stop_short
                reach = v * v / (2.0 * cfg.friction_decel) if cfg.friction_decel > 0 else math.inf
            key = (abs(reach - rng_to_target), i)
            if best_s is None or key < best_s:
                best_s = key
        si = best_s[1]
    return ThrowAction(x0_index=xi, angle_index=ai, speed_index=si)


def resolve_shot(shot: Shot, state: GameState, team: str,
                 events: Optional[list[str]] = None) -> ThrowAction:
    """Turn a leaf shot into a concrete grid action for `team`."""
    cfg = state.config
    if shot.kind == "hit":
        cx, cy = cfg.center_target
        opp_stones = [s for s in state.in_play_stones() if s.team != team]
        if not opp_stones:
            if events is not None:
                events.append("hit with no opponent stones: fell back to draw-to-center")
            return _aim(cfg, cfg.center_target, "landing", None)
        stone = min(opp_stones, key=lambda s: (math.hypot(s.x - cx, s.y - cy), s.x, s.y))
        return _aim(cfg, (stone.x, stone.y), "fast", None)
    if shot.kind == "guard":
        tx, ty = shot.target
        # Stop short of the target on the lane from the baseline below it.
        gy = max(ty - GUARD_SHORT_BY, cfg.stone_radius)
        return _aim(cfg, (tx, gy), "stop_short", shot.speed_hint)
    return _aim(cfg, shot.target, "landing", shot.speed_hint)


def decide(spec: DecisionTreeSpec, state: GameState,
           events: Optional[list[str]] = None) -> ThrowAction:
    """Walk the tree on the current state and return the thrower's action.

    Total for any validated spec: a hit with no opponent stones falls
    back to a centre draw (and notes the event) instead of failing.
    """
    feats = compute_features(state, state.thrower)
    node = spec.nodes[spec.root]
    for _ in range(MAX_DEPTH + 1):
        if isinstance(node, Leaf):
            return resolve_shot(node.shot, state, state.thrower, events)
        branch = node.true_branch if _compare(
            feats[node.feature], node.comparator, node.constant) else node.false_branch
        node = spec.nodes[branch]
    raise TreeParseError(["evaluation exceeded the depth cap"])  # unreachable on valid specs


class TreePolicy:
    """Match-facing adapter; records fallback events from `decide`."""

    def __init__(self, spec: DecisionTreeSpec):
        self.spec = spec
        self.events: list[str] = []

    def decide(self, state: GameState) -> ThrowAction:
        return decide(self.spec, state, self.events)


# ---------------------------------------------------------------------------
# Canonical form and semantic equality

def canonical_form(spec: DecisionTreeSpec) -> dict:
    """Comment- and naming-independent structure: nodes renumbered in
    preorder, constants rounded to 1e-9."""
    out: dict[str, dict] = {}
    order: dict[str, str] = {}

    def visit(node_id: str) -> str:
        new_id = f"n{len(order)}"
        order[node_id] = new_id
        node = spec.nodes[node_id]
        if isinstance(node, Condition):
            entry = {
                "type": "condition", "feature": node.feature,
                "comparator": node.comparator,
                "constant": round(node.constant, 9),
            }
            out[new_id] = entry
            entry["true_branch"] = visit(node.true_branch)
            entry["false_branch"] = visit(node.false_branch)
        else:
            shot = node.shot
            out[new_id] = {
                "type": "leaf", "kind": shot.kind,
                "target": None if shot.target is None else
                          [round(shot.target[0], 9), round(shot.target[1], 9)],
                "select": shot.select,
                "speed_hint": shot.speed_hint,
            }
        return new_id

    visit(spec.root)
    return {"root": "n0", "nodes": out}


def semantically_equal(a: DecisionTreeSpec, b: DecisionTreeSpec) -> bool:
    return canonical_form(a) == canonical_form(b)


# ---------------------------------------------------------------------------
# Fixture trees

def _doc(name: str, comment: str, root: str, nodes: dict) -> DecisionTreeSpec:
    return tree_from_doc({"name": name, "comment": comment, "root": root, "nodes": nodes})


def _leaf(kind: str, target=None, hint=None) -> dict:
    shot: dict = {"kind": kind}
    if target is not None:
        shot["target"] = list(target)
    if kind == "hit":
        shot["select"] = HIT_SELECTOR
    if hint is not None:
        shot["speed_hint"] = hint
    return {"type": "leaf", "shot": shot}


def _cond(feature: str, comparator: str, constant: float, yes: str, no: str) -> dict:
    return {"type": "condition", "feature": feature, "comparator": comparator,
            "constant": constant, "true_branch": yes, "false_branch": no}


CENTER = (5.0, 25.0)


def _attack_subtree(p: str) -> tuple[str, dict]:
    """Throwing last this game: punish house stones, otherwise pile up
    counters (build lanes spaced wider than a stone diameter so fresh
    draws clear the stones already sitting there)."""
    return f"{p}r", {
        f"{p}r": _cond("center_occupied_by", "=", 2, f"{p}hit", f"{p}own"),
        f"{p}hit": _leaf("hit"),
        f"{p}own": _cond("center_occupied_by", "=", 1, f"{p}hold", f"{p}dc"),
        f"{p}dc": _leaf("draw", CENTER),
        f"{p}hold": _cond("opp_stones_in_house", ">=", 1, f"{p}hit2", f"{p}build"),
        f"{p}hit2": _leaf("hit"),
        f"{p}build": _cond("own_stones_in_house", "<=", 1, f"{p}t1", f"{p}more"),
        f"{p}more": _cond("own_stones_in_house", "<=", 2, f"{p}t2", f"{p}t3"),
        f"{p}t1": _leaf("draw", (6.0, 24.8)),
        f"{p}t2": _leaf("draw", (4.0, 24.9)),
        f"{p}t3": _leaf("draw", (7.0, 24.9)),
    }


def _protect_subtree(p: str) -> tuple[str, dict]:
    """Opponent throws last: wall their centre lane every throw and only
    react to stones that leak into the house."""
    return f"{p}r", {
        f"{p}r": _cond("center_occupied_by", "=", 2, f"{p}hit", f"{p}own"),
        f"{p}hit": _leaf("hit"),
        f"{p}own": _cond("center_occupied_by", "=", 1, f"{p}g1", f"{p}g2"),
        f"{p}g1": _leaf("guard", CENTER),
        f"{p}g2": _leaf("guard", CENTER),
    }


def _tree_iii() -> DecisionTreeSpec:
    # "Do I throw last this game?" is own_throws_left > opp_throws_left,
    # unrolled over the four possible own counts since predicates only
    # compare a feature against a constant.
    nodes: dict[str, dict] = {}
    gates: dict[int, dict] = {}
    for own in (4, 3, 2):
        ar, an = _attack_subtree(f"h{own}")
        pr, pn = _protect_subtree(f"w{own}")
        nodes.update(an)
        nodes.update(pn)
        gates[own] = _cond("opp_throws_left", "<=", own - 1, ar, pr)
    ar, an = _attack_subtree("h1")
    pr, pn = _protect_subtree("w1")
    nodes.update(an)
    nodes.update(pn)
    nodes["own4"] = gates[4]
    nodes["own3"] = gates[3]
    nodes["own2"] = gates[2]
    nodes["own1"] = _cond("opp_throws_left", "<=", 0, ar, pr)
    nodes["r"] = _cond("own_throws_left", ">=", 4, "own4", "lv3")
    nodes["lv3"] = _cond("own_throws_left", ">=", 3, "own3", "lv2")
    nodes["lv2"] = _cond("own_throws_left", ">=", 2, "own2", "own1")
    return _doc(
        "tree_III",
        "attack or protect by the remaining-throw situation: with the last "
        "word this game, hit house stones and stack counters; without it, "
        "wall the centre lane and ignore stones outside the house",
        "r", nodes)


def builtin_trees() -> dict[str, DecisionTreeSpec]:
    """The four reference opponents used across tests and experiments.

    tree_I draws to the centre and protects it once held; tree_II adds
    takeouts whenever the opponent's house stone beats ours; tree_III
    weighs the remaining throws of both sides and switches between
    attacking the house and walling it off, ignoring stones outside the
    house; human_design is the blunter hit-anything baseline.
    """
    tree_i = _doc(
        "tree_I", "centre draws with a protective guard once we hold the house",
        "own_center",
        {
            "own_center": _cond("center_occupied_by", "=", 1, "guard_c", "draw_c"),
            "guard_c": _leaf("guard", CENTER),
            "draw_c": _leaf("draw", CENTER),
        })

    tree_ii = _doc(
        "tree_II", "take out the opponent's house stone when it beats ours, else build/guard",
        "opp_controls",
        {
            "opp_controls": _cond("center_occupied_by", "=", 2, "takeout", "own_center"),
            "takeout": _leaf("hit"),
            "own_center": _cond("center_occupied_by", "=", 1, "guard_c", "draw_c"),
            "guard_c": _leaf("guard", CENTER),
            "draw_c": _leaf("draw", CENTER),
        })

    human = _doc(
        "human_design", "hit whenever the opponent has a house stone, otherwise draw",
        "opp_in_house",
        {
            "opp_in_house": _cond("opp_stones_in_house", ">=", 1, "takeout", "draw_c"),
            "takeout": _leaf("hit"),
            "draw_c": _leaf("draw", CENTER),
        })

    return {"tree_I": tree_i, "tree_II": tree_ii, "tree_III": _tree_iii(),
            "human_design": human}
