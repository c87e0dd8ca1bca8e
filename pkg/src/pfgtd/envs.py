"""Benchmark MDPs with exact dynamics, and seeded transition samplers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

_ROW_TOL = 1e-12


@dataclass(frozen=True)
class MdpSpec:
    """Finite MDP plus the behavior/target pair and a linear feature map.

    ``sampling`` is ``"trajectory"`` (follow the behavior chain, restarting from
    ``start_dist`` after a terminal state) or ``"iid"`` (draw every state fresh from
    ``start_dist``).
    """

    name: str
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    behavior: np.ndarray  # (S, A)
    target: np.ndarray  # (S, A)
    features: np.ndarray  # (S, d)
    start_dist: np.ndarray  # (S,)
    terminal: np.ndarray  # (S,) bool
    sampling: str = "trajectory"

    def __post_init__(self):
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, A):
            raise ValueError("transition/reward shapes disagree")
        for name, pol in (("behavior", self.behavior), ("target", self.target)):
            if pol.shape != (S, A) or np.any(pol < 0):
                raise ValueError(f"{name} policy has bad shape or negative entries")
            if np.any(np.abs(pol.sum(axis=1) - 1) > _ROW_TOL):
                raise ValueError(f"{name} policy rows must sum to 1")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=2) - 1) > _ROW_TOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any((self.target > 0) & (self.behavior == 0)):
            raise ValueError("behavior policy does not cover the target policy")
        if abs(self.start_dist.sum() - 1) > _ROW_TOL or np.any(self.start_dist < 0):
            raise ValueError("start distribution must be a probability vector")
        if np.any(self.features[self.terminal] != 0):
            raise ValueError("terminal states must have zero features")
        if np.any(self.start_dist[self.terminal] > 0):
            raise ValueError("episodes cannot start in a terminal state")
        if not 0 <= self.gamma <= 1:
            raise ValueError("discount must lie in [0, 1]")
        if self.sampling not in ("trajectory", "iid"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def rho(self) -> np.ndarray:
        """Importance ratios pi/pi_b, zero where the behavior never acts."""
        safe = np.where(self.behavior > 0, self.behavior, 1.0)
        return np.where(self.behavior > 0, self.target / safe, 0.0)

    @property
    def rho_max(self) -> float:
        return float(self.rho.max())

    @property
    def feature_bound(self) -> float:
        return float(np.abs(self.features).max())

    @property
    def reward_bound(self) -> float:
        return float(np.abs(self.reward).max())

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "sampling": self.sampling,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "behavior": self.behavior.tolist(),
            "target": self.target.tolist(),
            "features": self.features.tolist(),
            "start_dist": self.start_dist.tolist(),
            "terminal": self.terminal.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def random_walk(features: str = "tabular") -> MdpSpec:
    """Five-state random walk; state 0 and 6 are the left/right terminals."""
    n = 7
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    for s in range(1, 6):
        P[s, 0, s - 1] = 1.0
        P[s, 1, s + 1] = 1.0
    P[0, :, 0] = P[6, :, 6] = 1.0
    R[1, 0] = -1.0
    R[5, 1] = 1.0
    behavior = np.full((n, 2), 0.5)
    target = np.tile([0.4, 0.6], (n, 1))

    if features == "tabular":
        phi = np.eye(5)
    elif features == "inverted":
        # one-cold, scaled to unit norm
        phi = (1.0 - np.eye(5)) / 2.0
    elif features == "dependent":
        r2, r3 = 1 / math.sqrt(2), 1 / math.sqrt(3)
        phi = np.array([
            [1, 0, 0],
            [r2, r2, 0],
            [r3, r3, r3],
            [0, r2, r2],
            [0, 0, 1],
        ], dtype=float)
    else:
        raise ValueError(f"unknown random-walk features {features!r}")
    Phi = np.zeros((n, phi.shape[1]))
    Phi[1:6] = phi
    start = np.zeros(n)
    start[3] = 1.0
    terminal = np.zeros(n, dtype=bool)
    terminal[[0, 6]] = True
    return MdpSpec(f"random-walk-{features}", P, R, 1.0, behavior, target, Phi, start, terminal)


def boyan_chain() -> MdpSpec:
    """13-state Boyan chain with 4 interpolating features.

    Index ``i-1`` holds state ``s_i``; index 13 is the absorbing terminal.  The two
    actions are "step one" (reward -2) and "step two" (reward -3), each taken with
    probability 1/2 by both policies, so every ratio is 1.
    """
    n = 14
    term = 13
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    for i in range(3, 14):
        P[i - 1, 0, i - 2] = 1.0
        P[i - 1, 1, i - 3] = 1.0
        R[i - 1] = (-2.0, -3.0)
    P[1, :, 0] = 1.0
    R[1] = -2.0
    P[0, :, term] = 1.0
    P[term, :, term] = 1.0
    pol = np.full((n, 2), 0.5)

    anchors = {13: 0, 9: 1, 5: 2, 1: 3}
    Phi = np.zeros((n, 4))
    for i in range(1, 14):
        if i in anchors:
            Phi[i - 1, anchors[i]] = 1.0
            continue
        hi = min(a for a in anchors if a > i)
        lo = hi - 4
        frac = (hi - i) / 4.0
        Phi[i - 1, anchors[hi]] = 1.0 - frac
        Phi[i - 1, anchors[lo]] = frac
    start = np.zeros(n)
    start[12] = 1.0
    terminal = np.zeros(n, dtype=bool)
    terminal[term] = True
    return MdpSpec("boyan", P, R, 1.0, pol, pol.copy(), Phi, start, terminal)


def baird_star(behavior: str = "equiprobable") -> MdpSpec:
    """Baird's 7-state star.  Action 0 is "solid" (to state 7), action 1 "dashed"."""
    n = 7
    P = np.zeros((n, 2, n))
    P[:, 0, 6] = 1.0
    P[:, 1, :6] = 1.0 / 6.0
    R = np.zeros((n, 2))
    target = np.tile([1.0, 0.0], (n, 1))
    if behavior == "equiprobable":
        pb = np.tile([0.5, 0.5], (n, 1))
    elif behavior == "classic":
        pb = np.tile([1.0 / 7.0, 6.0 / 7.0], (n, 1))
    else:
        raise ValueError(f"unknown Baird behavior {behavior!r}")
    Phi = np.zeros((n, 8))
    for i in range(6):
        Phi[i, i] = 2.0
        Phi[i, 7] = 1.0
    Phi[6, 6] = 1.0
    Phi[6, 7] = 2.0
    start = np.full(n, 1.0 / n)
    return MdpSpec("baird", P, R, 0.99, pb, target, Phi, start,
                   np.zeros(n, dtype=bool), sampling="iid")


BAIRD_INIT = np.array([1, 1, 1, 1, 1, 1, 1, 10], dtype=float)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class TransitionSample:
    """Batched transitions ``(phi, phi', r, rho)``; leading dims are runs."""

    phi: np.ndarray
    phi_next: np.ndarray
    reward: np.ndarray
    rho: np.ndarray
    gamma: float
    state: Optional[np.ndarray] = None
    action: Optional[np.ndarray] = None
    next_state: Optional[np.ndarray] = None


def _inverse_cdf(cum, u):
    # first index whose cumulative mass exceeds u; rows of cum end at 1
    idx = (cum > u[..., None]).argmax(axis=-1)
    return np.minimum(idx, cum.shape[-1] - 1)


class _Tables:
    def __init__(self, spec: MdpSpec):
        self.behavior_cum = np.cumsum(spec.behavior, axis=1)
        self.behavior_cum[:, -1] = 1.0
        self.trans_cum = np.cumsum(spec.transition, axis=2)
        self.trans_cum[:, :, -1] = 1.0
        self.start_cum = np.cumsum(spec.start_dist)
        self.start_cum[-1] = 1.0
        self.rho = spec.rho


def _draw(spec: MdpSpec, tab: _Tables, state, u):
    """Advance ``state`` (runs,) using uniforms ``u`` (runs, 3)."""
    if spec.sampling == "iid":
        state = _inverse_cdf(tab.start_cum, u[:, 2])
    a = _inverse_cdf(tab.behavior_cum[state], u[:, 0])
    s2 = _inverse_cdf(tab.trans_cum[state, a], u[:, 1])
    sample = TransitionSample(
        phi=spec.features[state],
        phi_next=spec.features[s2],
        reward=spec.reward[state, a],
        rho=tab.rho[state, a],
        gamma=spec.gamma,
        state=state, action=a, next_state=s2,
    )
    nxt = s2
    if spec.sampling == "trajectory":
        done = spec.terminal[s2]
        if np.any(done):
            restart = _inverse_cdf(tab.start_cum, u[:, 2])
            nxt = np.where(done, restart, s2)
    return sample, nxt


@dataclass
class SamplerState:
    current_state: int
    rng: np.random.Generator = field(repr=False)


def initial_sampler_state(spec: MdpSpec, seed: int) -> SamplerState:
    rng = np.random.default_rng(seed)
    u = rng.random(3)
    s = int(_inverse_cdf(np.cumsum(spec.start_dist), np.array([u[2]]))[0])
    return SamplerState(s, rng)


def sample_transition(spec: MdpSpec, state: SamplerState, _tables: Optional[_Tables] = None):
    """Draw one transition for a single run; returns ``(sample, new_state)``."""
    tab = _tables or _Tables(spec)
    u = state.rng.random((1, 3))
    sample, nxt = _draw(spec, tab, np.array([state.current_state]), u)
    one = TransitionSample(sample.phi[0], sample.phi_next[0], sample.reward[0], sample.rho[0],
                           sample.gamma, sample.state[0], sample.action[0], sample.next_state[0])
    return one, SamplerState(int(nxt[0]), state.rng)


class BatchSampler:
    """Independent samplers for many runs, run ``i`` seeded with ``seeds[i]``.

    Run ``i`` consumes exactly the same random stream as a single-run sampler built
    with the same seed, so a batch reproduces the runs it contains.
    """

    def __init__(self, spec: MdpSpec, seeds: Sequence[int], block: int = 512):
        self.spec = spec
        self.tab = _Tables(spec)
        self.rngs = [np.random.default_rng(int(s)) for s in seeds]
        self.block = block
        self._buf = np.empty((len(self.rngs), 0, 3))
        self._pos = 0
        u0 = self._next_uniforms()
        self.state = _inverse_cdf(self.tab.start_cum, u0[:, 2])

    def _next_uniforms(self):
        if self._pos >= self._buf.shape[1]:
            self._buf = np.stack([r.random((self.block, 3)) for r in self.rngs])
            self._pos = 0
        u = self._buf[:, self._pos]
        self._pos += 1
        return u

    def sample(self) -> TransitionSample:
        s, self.state = _draw(self.spec, self.tab, self.state, self._next_uniforms())
        return s


# ---------------------------------------------------------------------------
# multi-scale prediction stream


@dataclass
class PredictionStream:
    """On-policy feature/reward stream with one reward column per signal."""

    features: np.ndarray  # (T + 1, d)
    rewards: np.ndarray  # (T, n_signals), reward observed on leaving step t
    gamma: float
    scales: np.ndarray


def multi_scale_stream(n_signals: int, scales: Sequence[float], noise: Sequence[float],
                       seed: int, n_steps: int = 5000, n_states: int = 20,
                       gamma: float = 0.9875) -> PredictionStream:
    """Markov chain over ``n_states`` tabular states; signal ``k`` pays
    ``scales[k] * f_k(s') + noise[k] * N(0, 1)`` with ``f_k`` a fixed profile in [0, 1]."""
    if n_signals < 1:
        raise ValueError("need at least one signal")
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (n_signals,)).copy()
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (n_signals,)).copy()
    rng = np.random.default_rng(seed)
    # sticky ring walk so returns carry state information
    P = np.zeros((n_states, n_states))
    for s in range(n_states):
        P[s, s] = 0.5
        P[s, (s + 1) % n_states] = 0.3
        P[s, (s - 1) % n_states] = 0.2
    profiles = rng.random((n_signals, n_states))
    states = np.empty(n_steps + 1, dtype=int)
    states[0] = rng.integers(n_states)
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(n_steps)
    for t in range(n_steps):
        states[t + 1] = int(np.searchsorted(cum[states[t]], u[t], side="right"))
    eps = rng.standard_normal((n_steps, n_signals))
    rewards = scales * profiles[:, states[1:]].T + noise * eps
    phi = np.eye(n_states)[states]
    return PredictionStream(phi, rewards, gamma, scales)


# ---------------------------------------------------------------------------
# registry

ENVIRONMENTS: Dict[str, Callable[[], MdpSpec]] = {
    "random-walk-tabular": lambda: random_walk("tabular"),
    "random-walk-dependent": lambda: random_walk("dependent"),
    "random-walk-inverted": lambda: random_walk("inverted"),
    "boyan": boyan_chain,
    "baird": baird_star,
    "baird-classic": lambda: baird_star("classic"),
}
STREAM_ENVIRONMENTS = ("multi-scale",)
CLASSIC_ENVIRONMENTS = ("random-walk-tabular", "random-walk-dependent",
                        "random-walk-inverted", "boyan", "baird")


def make_env(name: str, baird_behavior: str = "equiprobable") -> MdpSpec:
    if name == "baird":
        return baird_star(baird_behavior)
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from "
                         f"{sorted(ENVIRONMENTS) + list(STREAM_ENVIRONMENTS)}") from None
