"""Policy-value MLP with hand-rolled backprop and the PPO machinery.

The network is a tanh MLP trunk with a softmax action head and a scalar
value head. Gradients are computed explicitly (no autodiff), which keeps
the whole update auditable against finite differences. Hidden layers get
a seeded scaled-normal init; both heads start at zero so the initial
policy is exactly uniform with value 0.

Loss convention: the entropy term is literally the mean of
``sum_a pi(a|s) log pi(a|s)`` (negative entropy), so minimising the total
loss with a positive entropy coefficient pushes entropy up.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NetNumericsError(RuntimeError):
    """A loss or gradient went non-finite; the update was rejected."""


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_epsilon: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    normalize_advantages: bool = True
    adv_norm_eps: float = 1e-8

    def validate(self) -> None:
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must be in [0,1] (got {self.gamma})")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must be in [0,1] (got {self.lam})")
        if self.clip_epsilon <= 0:
            raise ValueError(f"clip_epsilon must be > 0 (got {self.clip_epsilon})")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise ValueError("value_coef and entropy_coef must be >= 0")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0 (got {self.learning_rate})")


@dataclass
class Transition:
    """One agent decision; `r` is rewritten to the lambda-return and
    `advantage` filled by `gae_returns` before training."""

    s: np.ndarray
    a: int
    r: float
    v: float
    logp: float
    advantage: float = 0.0


class PolicyNet:
    """18 -> hidden -> hidden -> (action logits, value), float64 throughout."""

    def __init__(self, input_dim: int, hidden: Sequence[int], n_actions: int,
                 seed: int = 0):
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_actions = int(n_actions)
        rng = np.random.Generator(np.random.PCG64(seed))
        sizes = [self.input_dim, *self.hidden]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            scale = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        last = sizes[-1]
        # Zero heads: uniform initial policy, zero initial value.
        self.w_pi = np.zeros((last, self.n_actions))
        self.b_pi = np.zeros(self.n_actions)
        self.w_v = np.zeros(last)
        self.b_v = 0.0
        self._adam_m: Optional[list[np.ndarray]] = None
        self._adam_v: Optional[list[np.ndarray]] = None
        self._adam_t = 0

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.w_pi, self.b_pi,
                self.w_v, np.atleast_1d(np.float64(self.b_v))]

    def _set_b_v(self, value: float) -> None:
        self.b_v = float(value)

    def copy(self) -> "PolicyNet":
        dup = PolicyNet(self.input_dim, self.hidden, self.n_actions)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup.w_pi = self.w_pi.copy()
        dup.b_pi = self.b_pi.copy()
        dup.w_v = self.w_v.copy()
        dup.b_v = self.b_v
        return dup

    # -- forward -----------------------------------------------------------

    def _trunk(self, x: np.ndarray) -> list[np.ndarray]:
        acts = [x]
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
            acts.append(h)
        return acts

    def forward_batch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(probs [B,A], values [B]) for a batch of feature rows."""
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected [B, {self.input_dim}] input, got {x.shape}")
        h = self._trunk(x)[-1]
        logits = h @ self.w_pi + self.b_pi
        probs = _softmax(logits)
        values = h @ self.w_v + self.b_v
        return probs, values


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(net: PolicyNet, s: np.ndarray) -> tuple[np.ndarray, float]:
    """Action distribution and value estimate for one observation."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (net.input_dim,):
        raise ValueError(f"expected input of shape ({net.input_dim},), got {s.shape}")
    probs, values = net.forward_batch(s[None, :])
    return probs[0], float(values[0])


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    total = float(probs.sum())
    if not math.isfinite(total) or total <= 0:
        raise NetNumericsError(f"degenerate action distribution (sum={total})")
    # Inverse-CDF draw keeps the sample reproducible from the generator state.
    u = rng.random() * total
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, len(probs) - 1)
    p = float(probs[idx])
    if p <= 0:
        raise NetNumericsError("sampled an action of zero probability")
    return idx, math.log(p)


def clip(ratio: float, epsilon: float) -> float:
    """Piecewise clip of the policy ratio to [1-eps, 1+eps]."""
    if ratio > 1.0 + epsilon:
        return 1.0 + epsilon
    if ratio < 1.0 - epsilon:
        return 1.0 - epsilon
    return ratio


def gae_returns(traj: list[Transition], gamma: float, lam: float) -> list[Transition]:
    """Backward advantage recursion over one episode.

    d_t = r_t + gamma*v_{t+1} - v_t + gamma*lam*d_{t+1} with the
    boundary v_{T+1} = d_{T+1} = 0; each transition's advantage becomes
    d_t and its reward is rewritten in place to the return d_t + v_t.
    """
    d_next = 0.0
    v_next = 0.0
    for t in reversed(range(len(traj))):
        tr = traj[t]
        d = tr.r + gamma * v_next - tr.v + gamma * lam * d_next
        tr.advantage = d
        tr.r = d + tr.v
        d_next = d
        v_next = tr.v
    return traj


def _normalized_advantages(batch: list[Transition], cfg: PPOConfig) -> np.ndarray:
    adv = np.array([t.advantage for t in batch], dtype=np.float64)
    if cfg.normalize_advantages and len(batch) > 1:
        adv = (adv - adv.mean()) / (adv.std() + cfg.adv_norm_eps)
    return adv


def _loss_terms_and_grads(net: PolicyNet, batch: list[Transition],
                          old_logp: np.ndarray, cfg: PPOConfig,
                          want_grads: bool):
    """Shared forward/backward pass for `ppo_loss` and `update`."""
    x = np.stack([t.s for t in batch]).astype(np.float64)
    actions = np.array([t.a for t in batch], dtype=np.int64)
    returns = np.array([t.r for t in batch], dtype=np.float64)
    adv = _normalized_advantages(batch, cfg)
    n = len(batch)

    acts = net._trunk(x)
    h = acts[-1]
    logits = h @ net.w_pi + net.b_pi
    log_z = logits - logits.max(axis=1, keepdims=True)
    log_probs = log_z - np.log(np.exp(log_z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    values = h @ net.w_v + net.b_v

    rows = np.arange(n)
    logp_new = log_probs[rows, actions]
    ratio = np.exp(logp_new - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
    surr_plain = ratio * adv
    surr_clip = clipped * adv
    take_plain = surr_plain <= surr_clip
    policy_term = -float(np.minimum(surr_plain, surr_clip).mean())

    value_err = returns - values
    value_term = float((value_err ** 2).mean())

    ent_rows = (probs * log_probs).sum(axis=1)
    entropy_term = float(ent_rows.mean())

    total = policy_term + cfg.value_coef * value_term + cfg.entropy_coef * entropy_term
    terms = (total, policy_term, value_term, entropy_term)
    if not all(math.isfinite(t) for t in terms):
        raise NetNumericsError(f"non-finite loss terms: {terms}")
    if not want_grads:
        return terms, None

    # d(policy)/d(logp_new): the min picks the plain branch when it is
    # not larger; the clipped branch has zero slope outside the band.
    g_logp = np.where(take_plain, surr_plain, 0.0)
    d_logits = (probs * g_logp[:, None])
    d_logits[rows, actions] -= g_logp
    d_logits /= n
    # entropy: d(sum p log p)/d(logits) = p * (log p - sum p log p)
    d_logits += cfg.entropy_coef * (probs * (log_probs - ent_rows[:, None])) / n

    d_values = cfg.value_coef * (-2.0 / n) * value_err

    grads: dict[str, object] = {
        "w_pi": h.T @ d_logits,
        "b_pi": d_logits.sum(axis=0),
        "w_v": h.T @ d_values,
        "b_v": d_values.sum(),
    }
    d_h = d_logits @ net.w_pi.T + np.outer(d_values, net.w_v)
    d_weights = []
    d_biases = []
    for layer in reversed(range(len(net.weights))):
        pre = d_h * (1.0 - acts[layer + 1] ** 2)
        d_weights.append(acts[layer].T @ pre)
        d_biases.append(pre.sum(axis=0))
        if layer > 0:
            d_h = pre @ net.weights[layer].T
    grads["weights"] = list(reversed(d_weights))
    grads["biases"] = list(reversed(d_biases))
    return terms, grads


def ppo_loss(net: PolicyNet, batch: list[Transition], old_logp: np.ndarray,
             cfg: PPOConfig) -> tuple[float, float, float, float]:
    """(total, policy_term, value_term, entropy_term) on a prepared batch.

    The batch must already carry advantages and rewritten returns from
    `gae_returns`; `old_logp` holds the behaviour policy's log-probs.
    """
    if not batch:
        raise ValueError("empty batch")
    terms, _ = _loss_terms_and_grads(net, batch, np.asarray(old_logp, dtype=np.float64),
                                     cfg, want_grads=False)
    return terms


def loss_and_grads(net: PolicyNet, batch: list[Transition], old_logp: np.ndarray,
                   cfg: PPOConfig):
    """Loss terms plus explicit gradients; exposed for the gradient checks."""
    if not batch:
        raise ValueError("empty batch")
    return _loss_terms_and_grads(net, batch, np.asarray(old_logp, dtype=np.float64),
                                 cfg, want_grads=True)


def update(net: PolicyNet, batch: list[Transition], cfg: PPOConfig) -> PolicyNet:
    """One Adam step on the total loss at cfg.learning_rate, in place.

    Old log-probs come from the stored transitions. A non-finite loss or
    gradient rejects the step and raises without touching the net.
    """
    if not batch:
        raise ValueError("empty batch")
    if cfg.learning_rate == 0.0:
        return net
    old_logp = np.array([t.logp for t in batch], dtype=np.float64)
    _, grads = loss_and_grads(net, batch, old_logp, cfg)
    flat = [*grads["weights"], *grads["biases"], grads["w_pi"], grads["b_pi"],
            grads["w_v"], np.atleast_1d(np.float64(grads["b_v"]))]
    for g in flat:
        if not np.all(np.isfinite(g)):
            raise NetNumericsError("non-finite gradient; update rejected")

    if net._adam_m is None:
        net._adam_m = [np.zeros_like(g) for g in flat]
        net._adam_v = [np.zeros_like(g) for g in flat]
    net._adam_t += 1
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = net._adam_t
    steps = []
    for i, g in enumerate(flat):
        net._adam_m[i] = beta1 * net._adam_m[i] + (1 - beta1) * g
        net._adam_v[i] = beta2 * net._adam_v[i] + (1 - beta2) * g * g
        m_hat = net._adam_m[i] / (1 - beta1 ** t)
        v_hat = net._adam_v[i] / (1 - beta2 ** t)
        steps.append(cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps))

    k = len(net.weights)
    for i in range(k):
        net.weights[i] -= steps[i]
        net.biases[i] -= steps[k + i]
    net.w_pi -= steps[2 * k]
    net.b_pi -= steps[2 * k + 1]
    net.w_v -= steps[2 * k + 2]
    net.b_v -= float(steps[2 * k + 3][0])
    return net


# ---------------------------------------------------------------------------
# Checkpoints: versioned JSON, exact float64 round-trip, stable bytes.

def save_checkpoint(net: PolicyNet, path: str | Path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "input_dim": net.input_dim,
        "hidden": list(net.hidden),
        "n_actions": net.n_actions,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "w_pi": net.w_pi.tolist(),
        "b_pi": net.b_pi.tolist(),
        "w_v": net.w_v.tolist(),
        "b_v": net.b_v,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> PolicyNet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    net = PolicyNet(doc["input_dim"], doc["hidden"], doc["n_actions"])
    net.weights = [np.array(w, dtype=np.float64) for w in doc["weights"]]
    net.biases = [np.array(b, dtype=np.float64) for b in doc["biases"]]
    net.w_pi = np.array(doc["w_pi"], dtype=np.float64)
    net.b_pi = np.array(doc["b_pi"], dtype=np.float64)
    net.w_v = np.array(doc["w_v"], dtype=np.float64)
    net.b_v = float(doc["b_v"])
    return net
