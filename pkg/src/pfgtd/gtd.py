"""Gradient-TD learners built on the saddle-point formulation.

The parameter-free variants run two independent OLO learners, one over theta and
one over the auxiliary y, on the stochastic subgradients of
``L(theta, y) = <b - A theta, y> - 1/2 ||y||_M^2``, and report averaged iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .envs import TransitionSample
from .olo import (
    CWPF, PF, ConstrainedClipping, FeasibleSet, FreeRange, PFPlus, IterateTracer,
)

PF_VARIANTS = ("pfgtd", "cw-pfgtd", "pfgtd+", "frgtd")
BASELINES = ("td", "gtd2", "tdc", "tdrc")


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


@dataclass
class SubgradientPair:
    g_theta: np.ndarray
    g_y: np.ndarray

    def joint_norm(self):
        return np.sqrt(_dot(self.g_theta, self.g_theta) + _dot(self.g_y, self.g_y))


def make_subgradients(sample: TransitionSample, theta, y, objective: str = "mspbe") -> SubgradientPair:
    """Stochastic subgradients of the saddle-point objective at ``(theta, y)``.

    The rank-one matrix ``rho phi (phi - gamma phi')^T`` is applied implicitly.
    """
    phi, phi_next = sample.phi, sample.phi_next
    theta = np.asarray(theta, float)
    y = np.asarray(y, float)
    if not (phi.shape == phi_next.shape and phi.shape[-1] == theta.shape[-1] == y.shape[-1]):
        raise ValueError(f"dimension mismatch: phi {phi.shape}, theta {theta.shape}, y {y.shape}")
    rho = np.asarray(sample.rho, float)[..., None]
    e = phi - sample.gamma * phi_next
    phi_y = _dot(phi, y)[..., None]
    g_theta = -rho * e * phi_y
    m_y = phi * phi_y if objective == "mspbe" else y
    g_y = -rho * np.asarray(sample.reward, float)[..., None] * phi + rho * phi * _dot(e, theta)[..., None] + m_y
    return SubgradientPair(g_theta, g_y)


def subgradient_bounds(rho_max, d, L, gamma, D, r_max):
    """Almost-sure bounds on ||g_theta|| and ||g_y|` for in-domain iterates."""
    g_theta = D * (1 + gamma) * rho_max * d * L ** 2
    g_y = rho_max * r_max * np.sqrt(d) * L + d * L ** 2 * D * ((1 + gamma) * rho_max + 1)
    return g_theta, g_y


@dataclass
class LearnerState:
    theta: np.ndarray
    y: np.ndarray
    theta_avg: np.ndarray
    y_avg: np.ndarray
    step_count: int = 0


class RegretTracker:
    """Linear regret sum_t <g_t, z_t - u>, kept per side for any comparator.

    Stores ``sum <g_t, z_t>`` and ``sum g_t`` so the comparator can be chosen later.
    """

    def __init__(self, shape, dim):
        self.inner_theta = np.zeros(shape)
        self.inner_y = np.zeros(shape)
        self.sum_g_theta = np.zeros(tuple(shape) + (dim,))
        self.sum_g_y = np.zeros(tuple(shape) + (dim,))
        self.sq_theta = np.zeros(shape)
        self.sq_y = np.zeros(shape)
        self.steps = 0

    def record(self, theta, y, grads: SubgradientPair):
        self.inner_theta += _dot(grads.g_theta, theta)
        self.inner_y += _dot(grads.g_y, y)
        self.sum_g_theta += grads.g_theta
        self.sum_g_y += grads.g_y
        self.sq_theta += _dot(grads.g_theta, grads.g_theta)
        self.sq_y += _dot(grads.g_y, grads.g_y)
        self.steps += 1

    def regret(self, theta_cmp, y_cmp):
        """Return ``(R_theta, R_y, R_theta + R_y)`` against the given comparator."""
        r_t = self.inner_theta - _dot(self.sum_g_theta, np.asarray(theta_cmp, float))
        r_y = self.inner_y - _dot(self.sum_g_y, np.asarray(y_cmp, float))
        return r_t, r_y, r_t + r_y


def regret_tracker(records, comparator):
    """Cumulative regret of a stream of ``(z_t, g_t)`` pairs against ``z*``.

    ``z`` and ``g`` are ``(theta, y)`` tuples; returns ``(R_theta, R_y, total)``.
    """
    theta_c, y_c = comparator
    r_t = r_y = 0.0
    for (theta, y), (g_t, g_y) in records:
        r_t += float(np.dot(g_t, np.subtract(theta, theta_c)))
        r_y += float(np.dot(g_y, np.subtract(y, y_c)))
    return r_t, r_y, r_t + r_y


class SaddlePointLearner:
    """Runs a pair of constrained OLO learners on the saddle-point subgradients."""

    def __init__(self, theta_learner: ConstrainedClipping, y_learner: ConstrainedClipping,
                 objective: str = "mspbe", track_regret: bool = True):
        self.A_theta = theta_learner
        self.A_y = y_learner
        self.objective = objective
        shape = theta_learner.learner.shape
        d = theta_learner.dim
        self.state = LearnerState(np.zeros(shape + (d,)), np.zeros(shape + (d,)),
                                  np.zeros(shape + (d,)), np.zeros(shape + (d,)), 0)
        self.regret = RegretTracker(shape, d) if track_regret else None

    def current(self):
        return self.A_theta.play(), self.A_y.play()

    def estimate(self):
        """The averaged primary weights (the reported solution)."""
        if self.state.step_count == 0:
            return self.A_theta.play()
        return self.state.theta_avg

    def step(self, sample: TransitionSample):
        sp_reduction_step(self, sample)
        return self.state


def sp_reduction_step(learner: SaddlePointLearner, sample: TransitionSample) -> LearnerState:
    """Play both sides, feed each its subgradient, and fold the played points into the averages."""
    theta, y = learner.A_theta.play(), learner.A_y.play()
    grads = make_subgradients(sample, theta, y, learner.objective)
    learner.A_theta.update(grads.g_theta)
    learner.A_y.update(grads.g_y)
    if learner.regret is not None:
        learner.regret.record(theta, y, grads)
    st = learner.state
    t = st.step_count + 1
    theta_avg = st.theta_avg + (theta - st.theta_avg) / t
    y_avg = st.y_avg + (y - st.y_avg) / t
    learner.state = LearnerState(theta, y, theta_avg, y_avg, t)
    learner.last_grads = grads
    return learner.state


def _make_side(variant, d, W0, eps_hat, feasible, shape, warm=None, tracer=None):
    """One constrained OLO learner for a side; ``warm`` is the first point to play."""
    if variant == "pfgtd":
        if warm is None:
            inner = PF(d, W0 / 2, eps_hat, shape)
        else:
            nrm = np.linalg.norm(warm)
            inner = PF(d, 2 * nrm, eps_hat, shape, direction=warm / nrm, beta=0.5)
    elif variant == "cw-pfgtd":
        if warm is None:
            inner = CWPF(d, W0, eps_hat, shape)
        else:
            inner = CWPF(d, 2 * warm, eps_hat, shape, beta=0.5)
    elif variant == "pfgtd+":
        h1 = np.full(tuple(shape) + (d,), float(eps_hat))
        pf_hint = np.linalg.norm(h1, axis=-1) / np.sqrt(d)
        if warm is None:
            pf = PF(d, d / 2 * W0, pf_hint, shape, check_norm=False)
            cw = CWPF(d, W0 / 2, h1, shape)
        else:
            # each component carries half of the requested first point
            half = warm / 2
            nrm = np.linalg.norm(half)
            pf = PF(d, 2 * nrm, pf_hint, shape, direction=half / nrm, beta=0.5,
                    check_norm=False)
            cw = CWPF(d, 2 * half, h1, shape, beta=0.5)
        inner = PFPlus(d, W0, eps_hat, shape, pf=pf, cwpf=cw)
    elif variant == "frgtd":
        if warm is not None:
            raise ValueError("FreeRange learners do not support warm starts")
        inner = FreeRange(d, eps_hat, shape)
    else:
        raise ValueError(f"unknown parameter-free variant {variant!r}")
    return ConstrainedClipping(inner, feasible, eps_hat, tracer=tracer)


def pfgtd_factory(variant: str, d: int, W0: float = 1.0, eps_hat: float = 1.0,
                  feasible: Optional[FeasibleSet] = None, warm_start=None, shape=(),
                  objective: str = "mspbe", track_regret: bool = True,
                  tracer: Optional[IterateTracer] = None) -> SaddlePointLearner:
    """Assemble PFGTD / CW-PFGTD / PFGTD+ (or the FreeRange variant).

    ``warm_start`` seeds the theta side so that its first played point is exactly
    ``warm_start``; the y side always starts at zero.
    """
    if not (W0 > 0 and eps_hat > 0):
        raise ValueError("W0 and eps_hat must be positive")
    feasible = feasible or FeasibleSet()
    warm = None
    if warm_start is not None:
        warm = np.asarray(warm_start, float)
        if warm.shape[-1] != d:
            raise ValueError("warm start has the wrong dimension")
        if variant in ("cw-pfgtd", "pfgtd+") and np.any(warm <= 0):
            raise ValueError("coordinate-wise warm start needs every coordinate positive")
        if variant == "pfgtd" and not np.linalg.norm(warm) > 0:
            raise ValueError("warm start must be nonzero")
    theta_side = _make_side(variant, d, W0, eps_hat, feasible, shape, warm, tracer)
    y_side = _make_side(variant, d, W0, eps_hat, feasible, shape)
    return SaddlePointLearner(theta_side, y_side, objective, track_regret)


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineConfig:
    algorithm: str
    step_size: float = 2.0 ** -5
    secondary_step_ratio: float = 1.0
    tdrc_beta: float = 1.0

    def __post_init__(self):
        self.algorithm = self.algorithm.lower()
        if self.algorithm not in BASELINES:
            raise ValueError(f"unknown baseline {self.algorithm!r}")
        if not np.all(np.asarray(self.step_size) > 0):
            raise ValueError("step size must be positive")


def baseline_step(config: BaselineConfig, state, sample: TransitionSample):
    """One update of TD / GTD2 / TDC / TDRC; ``state`` is ``(theta, y)``.

    ``config.step_size`` may be an array broadcasting over the run axis.
    """
    theta, y = state
    phi, phi_next = sample.phi, sample.phi_next
    gamma = sample.gamma
    rho = np.asarray(sample.rho, float)[..., None]
    r = np.asarray(sample.reward, float)[..., None]
    alpha = np.asarray(config.step_size, float)
    if alpha.ndim:
        alpha = alpha[..., None]
    delta = r + gamma * _dot(phi_next, theta)[..., None] - _dot(phi, theta)[..., None]
    phi_y = _dot(phi, y)[..., None]
    algo = config.algorithm
    if algo == "td":
        return theta + alpha * rho * delta * phi, y
    if algo == "gtd2":
        theta2 = theta + alpha * rho * (phi - gamma * phi_next) * phi_y
        y2 = y + alpha * rho * (delta - phi_y) * phi
        return theta2, y2
    theta2 = theta + alpha * rho * (delta * phi - gamma * phi_next * phi_y)
    if algo == "tdc":
        y2 = y + config.secondary_step_ratio * alpha * rho * (delta - phi_y) * phi
    else:
        y2 = y + alpha * (rho * delta * phi - phi_y * phi - config.tdrc_beta * y)
    return theta2, y2


class BaselineLearner:
    """Stateful wrapper around :func:`baseline_step`, optionally averaging."""

    def __init__(self, config: BaselineConfig, d: int, shape=(), theta0=None, average=False):
        self.config = config
        full = tuple(shape) + (d,)
        self.theta = np.zeros(full) if theta0 is None else np.broadcast_to(theta0, full).astype(float)
        self.y = np.zeros(full)
        self.average = average
        self.theta_avg = np.zeros(full)
        self.t = 0

    def step(self, sample):
        if self.average:
            self.t += 1
            self.theta_avg += (self.theta - self.theta_avg) / self.t
        self.theta, self.y = baseline_step(self.config, (self.theta, self.y), sample)

    def estimate(self):
        if self.average and self.t:
            return self.theta_avg
        return self.theta
