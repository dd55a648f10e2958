"""Actor/learner training against a fixed decision-tree opponent.

Many actor threads roll out matches as the learning side, rewrite each
episode's rewards with the advantage recursion, and push the processed
episode atomically into one bounded FIFO buffer. A single learner
drains exactly half the buffer capacity per trigger, takes one PPO step
and publishes fresh parameters; actors resynchronise at every episode.

``num_actors == 1`` switches to a fully serial round-robin (one episode,
then any due learner drain, then any due evaluation), which makes a
fixed-seed run bit-reproducible. Threaded runs keep the same buffer
semantics but interleave nondeterministically.

Rewards are sparse by design: nothing per throw, the game point
difference when a game ends, plus +/-1 for the match result. A shaping
hook exists for experiments and is off by default. Evaluation win rate
scores a drawn match as half a win.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dtree import DecisionTreeSpec, TreePolicy
from .net import (NetNumericsError, PolicyNet, PPOConfig, Transition, forward,
                  gae_returns, sample_action, save_checkpoint, update)
from .observation import FEATURE_LENGTH, build_features
from .sim import (GameState, MatchTrace, Policy, SimConfig, ThrowAction,
                  execute_throw, new_match, other_team, run_match)


class OpponentTreeError(RuntimeError):
    """The opponent policy failed during a rollout; the tree is at fault."""


@dataclass
class TrainerConfig:
    num_actors: int = 4
    buffer_capacity: int = 16384
    ppo: PPOConfig = field(default_factory=PPOConfig)
    sync_interval: int = 1
    eval_matches: int = 200
    win_rate_threshold: float = 0.55
    max_env_throws: int = 150_000
    eval_interval_throws: int = 8192
    lost_trace_cap: int = 5
    plateau_window: int = 5
    plateau_tol: float = 0.03
    hidden: tuple[int, ...] = (128, 128)
    reward_shaping: Optional[Callable[[GameState, GameState, str], float]] = None

    def validate(self) -> None:
        if self.num_actors < 1:
            raise ValueError("num_actors must be >= 1")
        if not 0.5 < self.win_rate_threshold < 1:
            raise ValueError("win_rate_threshold must be in (0.5, 1)")
        if self.buffer_capacity < 16:
            raise ValueError("buffer_capacity must be >= 16")
        if self.sync_interval < 1:
            raise ValueError("sync_interval must be >= 1")
        if self.max_env_throws < 0:
            raise ValueError("max_env_throws must be >= 0")
        self.ppo.validate()


@dataclass
class WinStats:
    wins: int
    losses: int
    draws: int
    win_rate: float  # draws count half
    lost_traces: list[MatchTrace] = field(default_factory=list)


@dataclass
class WinCurve:
    points: list[tuple[int, float]] = field(default_factory=list)

    def add(self, env_throws: int, win_rate: float) -> None:
        self.points.append((env_throws, win_rate))

    def to_csv(self) -> str:
        rows = ["env_throws,win_rate"]
        rows.extend(f"{t},{w:.6f}" for t, w in self.points)
        return "\n".join(rows) + "\n"


@dataclass
class TrainResult:
    net: PolicyNet
    win_curve: WinCurve
    verdict: str  # "flaw_found" | "no_flaw_found"
    final_win_rate: float
    env_throws: int
    updates: int
    checkpoint_path: Optional[Path] = None


class SharedBuffer:
    """Bounded FIFO of transitions with atomic episode pushes.

    Pushes block (backpressure) while the episode would not fit; the
    learner blocks until fill reaches capacity//2 and then drains
    exactly that many transitions. Counters track conservation:
    pushed == consumed + fill at every quiescent point.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._lock = threading.Lock()
        self._space = threading.Condition(self._lock)
        self._data = threading.Condition(self._lock)
        self._closed = False
        self.pushed = 0
        self.consumed = 0

    @property
    def fill(self) -> int:
        with self._lock:
            return len(self._items)

    def push_episode(self, transitions: list[Transition]) -> bool:
        """Append the whole episode or nothing; False once closed."""
        if len(transitions) > self.capacity:
            raise ValueError("episode larger than buffer capacity")
        with self._space:
            while not self._closed and len(self._items) + len(transitions) > self.capacity:
                self._space.wait(0.05)
            if self._closed:
                return False
            self._items.extend(transitions)
            self.pushed += len(transitions)
            if len(self._items) >= self.capacity // 2:
                self._data.notify_all()
        return True

    def drain_half(self, timeout: Optional[float] = None) -> Optional[list[Transition]]:
        """Exactly capacity//2 oldest transitions once available, else None."""
        want = self.capacity // 2
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._data:
            while not self._closed and len(self._items) < want:
                if deadline is not None and time.monotonic() >= deadline:
                    return None
                self._data.wait(0.05)
            if len(self._items) < want:
                return None
            batch = self._items[:want]
            del self._items[:want]
            self.consumed += want
            self._space.notify_all()
            return batch

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._space.notify_all()
            self._data.notify_all()


class ParamStore:
    """Versioned parameter snapshots: the learner publishes, actors copy."""

    def __init__(self, net: PolicyNet):
        self._lock = threading.Lock()
        self._net = net.copy()
        self.version = 0

    def publish(self, net: PolicyNet) -> int:
        with self._lock:
            self._net = net.copy()
            self.version += 1
            return self.version

    def snapshot(self) -> tuple[PolicyNet, int]:
        with self._lock:
            return self._net.copy(), self.version


class NetPolicy:
    """Policy adapter around a net: greedy for evaluation, sampling (with
    the actor's generator) for rollouts."""

    def __init__(self, net: PolicyNet, sim_config: SimConfig,
                 rng: Optional[np.random.Generator] = None):
        if net.n_actions != sim_config.n_actions:
            raise ValueError(
                f"net has {net.n_actions} actions but the grid defines {sim_config.n_actions}")
        self.net = net
        self.sim_config = sim_config
        self.rng = rng  # None -> greedy argmax

    def action_from_index(self, idx: int) -> ThrowAction:
        cfg = self.sim_config
        n_speed = len(cfg.speed_grid)
        n_angle = len(cfg.angle_grid_deg)
        x0_i, rest = divmod(idx, n_angle * n_speed)
        angle_i, speed_i = divmod(rest, n_speed)
        return ThrowAction(x0_index=x0_i, angle_index=angle_i, speed_index=speed_i)

    def decide(self, state: GameState) -> ThrowAction:
        feats = build_features(state, state.thrower)
        probs, _ = forward(self.net, feats)
        if self.rng is None:
            idx = int(np.argmax(probs))
        else:
            idx, _ = sample_action(probs, self.rng)
        return self.action_from_index(idx)


def _match_reward(prev: GameState, cur: GameState, agent: str) -> float:
    """Reward observed after one throw: game points when a game just
    ended, plus the +/-1 match result at the very end."""
    r = 0.0
    if len(cur.game_scores) > len(prev.game_scores):
        winner, points = cur.game_scores[-1]
        if winner == agent:
            r += float(points)
        elif winner is not None:
            r -= float(points)
    if cur.phase == "match_over":
        totals = cur.match_totals()
        diff = totals[agent] - totals[other_team(agent)]
        if diff > 0:
            r += 1.0
        elif diff < 0:
            r -= 1.0
    return r


def play_episode(net: PolicyNet, opponent: Policy, sim_config: SimConfig,
                 ppo: PPOConfig, match_seed: int, agent_team: str,
                 rng: np.random.Generator,
                 shaping: Optional[Callable] = None,
                 ) -> tuple[list[Transition], list[float], GameState, int]:
    """One match as `agent_team`: returns the GAE-processed transitions,
    the raw (pre-rewrite) rewards, the final state and the throw count."""
    policy = NetPolicy(net, sim_config, rng)
    state = new_match(sim_config, match_seed)
    transitions: list[Transition] = []
    raw_rewards: list[float] = []
    throws = 0
    while state.phase == "awaiting_throw":
        if state.thrower == agent_team:
            feats = build_features(state, agent_team)
            probs, value = forward(net, feats)
            a_idx, logp = sample_action(probs, rng)
            nxt, _ = execute_throw(state, policy.action_from_index(a_idx))
            transitions.append(Transition(s=feats, a=a_idx, r=0.0, v=value, logp=logp))
            raw_rewards.append(0.0)
        else:
            try:
                nxt, _ = execute_throw(state, opponent.decide(state))
            except Exception as exc:
                raise OpponentTreeError(
                    f"opponent policy failed on throw {state.total_throws}: {exc}") from exc
        if transitions:
            r = _match_reward(state, nxt, agent_team)
            if shaping is not None:
                r += shaping(state, nxt, agent_team)
            transitions[-1].r += r
            raw_rewards[-1] += r
        throws += 1
        state = nxt
    gae_returns(transitions, ppo.gamma, ppo.lam)
    return transitions, raw_rewards, state, throws


def actor_loop(actor_id: int, opponent: DecisionTreeSpec, buffer: SharedBuffer,
               model_source: ParamStore, sim_config: SimConfig,
               cfg: TrainerConfig, seed: int, stop: threading.Event,
               counters: "_Counters",
               episode_hook: Optional[Callable[[dict], None]] = None) -> None:
    """Play matches and push processed episodes until stopped.

    The learning side alternates between serving first and second. An
    episode in flight when the stop lands is discarded whole; there are
    never partial pushes.
    """
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xAC7, actor_id])))
    net, version = model_source.snapshot()
    episode = 0
    while not stop.is_set():
        if episode % cfg.sync_interval == 0:
            net, version = model_source.snapshot()
        match_seed = (seed % 1_000_000) * 1_000 + actor_id * 100_000_000 + episode
        agent_team = "A" if episode % 2 == 0 else "B"
        opp_policy = TreePolicy(opponent)
        transitions, raw, final_state, throws = play_episode(
            net, opp_policy, sim_config, cfg.ppo, match_seed, agent_team, rng,
            cfg.reward_shaping)
        if stop.is_set():
            break  # discard: no partial or late pushes
        if not buffer.push_episode(transitions):
            break
        counters.add_throws(throws)
        if episode_hook is not None:
            episode_hook({
                "actor_id": actor_id, "episode": episode, "version": version,
                "transitions": transitions, "raw_rewards": raw,
                "final_state": final_state, "throws": throws,
            })
        episode += 1


def learner_loop(buffer: SharedBuffer, net: PolicyNet, cfg: TrainerConfig,
                 model_source: ParamStore, stop: threading.Event,
                 counters: "_Counters",
                 checkpoint_dir: Optional[Path] = None) -> None:
    """Drain half-buffer batches and step the net until stopped.

    A numeric failure checkpoints what we have and aborts training.
    """
    while not stop.is_set():
        batch = buffer.drain_half(timeout=0.2)
        if batch is None:
            continue
        try:
            update(net, batch, cfg.ppo)
        except NetNumericsError:
            if checkpoint_dir is not None:
                checkpoint_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(net, checkpoint_dir / "abort.json")
            counters.record_error()
            stop.set()
            raise
        model_source.publish(net)
        counters.add_update()


class _Counters:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.env_throws = 0
        self.updates = 0
        self.errors = 0

    def add_throws(self, n: int) -> None:
        with self._lock:
            self.env_throws += n

    def add_update(self) -> None:
        with self._lock:
            self.updates += 1

    def record_error(self) -> None:
        with self._lock:
            self.errors += 1


def evaluate(policy_a: Policy, policy_b: Policy, n_matches: int, seed: int,
             sim_config: Optional[SimConfig] = None,
             lost_trace_cap: int = 5) -> WinStats:
    """Seeded head-to-head with alternating first serve.

    Win rate is from `policy_a`'s perspective with draws counted half.
    `lost_traces` keeps the matches `policy_b` lost (largest margin of
    defeat first), capped for prompt budgets.
    """
    cfg = sim_config or SimConfig()
    wins = losses = draws = 0
    lost: list[MatchTrace] = []
    for i in range(n_matches):
        a_first = i % 2 == 0
        if a_first:
            trace = run_match(policy_a, policy_b, cfg, seed=seed + i, labels=("a", "b"))
            a_team = "A"
        else:
            trace = run_match(policy_b, policy_a, cfg, seed=seed + i, labels=("b", "a"))
            a_team = "B"
        if trace.winner is None:
            draws += 1
        elif trace.winner == a_team:
            wins += 1
            lost.append(trace)
        else:
            losses += 1
    lost.sort(key=lambda t: -t.margin())
    rate = (wins + 0.5 * draws) / n_matches if n_matches else 0.0
    return WinStats(wins=wins, losses=losses, draws=draws, win_rate=rate,
                    lost_traces=lost[:lost_trace_cap])


def _plateaued(curve: WinCurve, window: int, tol: float) -> bool:
    if len(curve.points) < window:
        return False
    tail = [w for _, w in curve.points[-window:]]
    return max(tail) - min(tail) < tol


def train(opponent: DecisionTreeSpec, cfg: TrainerConfig, seed: int,
          sim_config: Optional[SimConfig] = None,
          out_dir: Optional[Path] = None,
          log: Optional[Callable[[str], None]] = None,
          episode_hook: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the flaw-search: train a policy against `opponent` until the
    evaluation win rate plateaus or the throw budget runs out.

    Verdict is "flaw_found" when the final win rate exceeds the
    configured threshold, else "no_flaw_found". A zero budget returns
    immediately with an empty curve.
    """
    cfg.validate()
    sim_cfg = sim_config or SimConfig()
    sim_cfg.validate()
    net = PolicyNet(FEATURE_LENGTH, cfg.hidden, sim_cfg.n_actions, seed=seed)
    curve = WinCurve()
    if cfg.max_env_throws <= 0:
        return TrainResult(net=net, win_curve=curve, verdict="no_flaw_found",
                           final_win_rate=0.0, env_throws=0, updates=0)

    ckpt_dir = (Path(out_dir) / "ckpt") if out_dir is not None else None
    opp_policy_err: list[BaseException] = []

    def eval_now(counters: _Counters, store: ParamStore, eval_idx: int) -> float:
        snap, _ = store.snapshot()
        stats = evaluate(NetPolicy(snap, sim_cfg), TreePolicy(opponent),
                         cfg.eval_matches, seed=(seed + 0x5EED) * 1_000_000 + eval_idx * 10_000,
                         sim_config=sim_cfg, lost_trace_cap=cfg.lost_trace_cap)
        curve.add(counters.env_throws, stats.win_rate)
        if log is not None:
            log(f"iter={counters.updates} fill={buffer.fill} win={stats.win_rate:.4f}")
        if ckpt_dir is not None:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(snap, ckpt_dir / f"iter_{counters.updates}.json")
        return stats.win_rate

    buffer = SharedBuffer(cfg.buffer_capacity)
    store = ParamStore(net)
    counters = _Counters()
    stop = threading.Event()

    if cfg.num_actors == 1:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0xAC7, 0])))
        episode = 0
        eval_idx = 0
        next_eval = cfg.eval_interval_throws
        actor_net, version = store.snapshot()
        while counters.env_throws < cfg.max_env_throws:
            if episode % cfg.sync_interval == 0:
                actor_net, version = store.snapshot()
            match_seed = (seed % 1_000_000) * 1_000 + episode
            agent_team = "A" if episode % 2 == 0 else "B"
            try:
                transitions, raw, final_state, throws = play_episode(
                    actor_net, TreePolicy(opponent), sim_cfg, cfg.ppo,
                    match_seed, agent_team, rng, cfg.reward_shaping)
            except OpponentTreeError:
                raise
            buffer.push_episode(transitions)
            counters.add_throws(throws)
            if episode_hook is not None:
                episode_hook({
                    "actor_id": 0, "episode": episode, "version": version,
                    "transitions": transitions, "raw_rewards": raw,
                    "final_state": final_state, "throws": throws,
                })
            episode += 1
            while buffer.fill >= cfg.buffer_capacity // 2:
                batch = buffer.drain_half(timeout=0)
                if batch is None:
                    break
                update(net, batch, cfg.ppo)
                store.publish(net)
                counters.add_update()
            if counters.env_throws >= next_eval:
                eval_now(counters, store, eval_idx)
                eval_idx += 1
                next_eval += cfg.eval_interval_throws
                if _plateaued(curve, cfg.plateau_window, cfg.plateau_tol):
                    break
    else:
        def actor_body(aid: int) -> None:
            try:
                actor_loop(aid, opponent, buffer, store, sim_cfg, cfg,
                           seed, stop, counters, episode_hook)
            except OpponentTreeError as exc:
                opp_policy_err.append(exc)
                stop.set()
                buffer.close()

        def learner_body() -> None:
            try:
                learner_loop(buffer, net, cfg, store, stop, counters, ckpt_dir)
            except NetNumericsError:
                pass  # stop flag already set by learner_loop

        actors = [threading.Thread(target=actor_body, args=(i,), daemon=True)
                  for i in range(cfg.num_actors)]
        learner = threading.Thread(target=learner_body, daemon=True)
        for t in actors:
            t.start()
        learner.start()
        eval_idx = 0
        next_eval = cfg.eval_interval_throws
        try:
            while counters.env_throws < cfg.max_env_throws and not stop.is_set():
                time.sleep(0.05)
                if counters.env_throws >= next_eval:
                    eval_now(counters, store, eval_idx)
                    eval_idx += 1
                    next_eval += cfg.eval_interval_throws
                    if _plateaued(curve, cfg.plateau_window, cfg.plateau_tol):
                        break
        finally:
            stop.set()
            buffer.close()
            for t in actors:
                t.join(timeout=10)
            learner.join(timeout=10)
        if opp_policy_err:
            raise opp_policy_err[0]
        net, _ = store.snapshot()

    # Final verdict evaluation at the stopping point.
    final_rate = eval_now(counters, store, 10_000)
    verdict = "flaw_found" if final_rate > cfg.win_rate_threshold else "no_flaw_found"
    ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_path = out / "final.json"
        save_checkpoint(net, ckpt_path)
    return TrainResult(net=net, win_curve=curve, verdict=verdict,
                       final_win_rate=final_rate, env_throws=counters.env_throws,
                       updates=counters.updates, checkpoint_path=ckpt_path)
