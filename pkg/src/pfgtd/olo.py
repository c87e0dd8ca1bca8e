"""Parameter-free online linear optimization.

Every state here is array-valued with arbitrary leading batch dimensions, so a
single learner object can drive many independent runs at once.  Vectors have
shape ``(..., d)``; per-learner scalars have shape ``(...)``.

Learners follow a play/update protocol::

    w = learner.play()
    learner.update(g, next_hint)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import IO, Optional

import numpy as np

ONS_GAIN = 2.0 / (2.0 - math.log(3.0))

# slack for hint checks; clipping h * g / ||g|| can overshoot h by an ulp
_HINT_RTOL = 1e-12
_PROJ_SLACK = 1.0 + 8 * np.finfo(float).eps


class ContractError(ValueError):
    """A caller broke an algorithm's precondition (e.g. fed a loss above its hint)."""


def _norm(x):
    return np.linalg.norm(x, axis=-1)


def _check_hint(magnitude, hint, what="loss"):
    if np.any(magnitude > hint * (1 + _HINT_RTOL) + 1e-300):
        worst = float(np.max(magnitude - hint))
        raise ContractError(f"{what} exceeds the hint in force by {worst:.3e}; clip first")


@dataclass(frozen=True)
class HintState:
    """Running Lipschitz hint, scalar (shape ``(...)``) or per-coordinate (``(..., d)``)."""

    mode: str
    value: np.ndarray
    initial_guess: float = 1.0

    @classmethod
    def initial(cls, mode: str, eps_hat: float = 1.0, shape=(), dim: Optional[int] = None):
        if mode not in ("scalar", "vector"):
            raise ValueError(f"unknown hint mode {mode!r}")
        if eps_hat < 0:
            raise ValueError("initial hint guess must be nonnegative")
        if mode == "vector":
            if dim is None:
                raise ValueError("vector hints need a dimension")
            shape = tuple(shape) + (dim,)
        return cls(mode, np.full(shape, float(eps_hat)), float(eps_hat))

    def magnitude(self, g):
        """Scaling map: ``||g||`` in scalar mode, ``|g_i|`` in vector mode."""
        return _norm(g) if self.mode == "scalar" else np.abs(g)

    def advance(self, g) -> "HintState":
        return replace(self, value=np.maximum(self.value, self.magnitude(g)))

    def norm(self):
        """Euclidean norm of the hint (the hint itself in scalar mode)."""
        return self.value if self.mode == "scalar" else _norm(self.value)


@dataclass(frozen=True)
class BettorState:
    """Coin-betting ONS state: fraction, wealth and ``1 + sum m^2``."""

    beta: np.ndarray
    wealth: np.ndarray
    curvature_sum: np.ndarray

    @classmethod
    def initial(cls, wealth, shape=(), beta=0.0):
        wealth = np.broadcast_to(np.asarray(wealth, dtype=float), shape).copy()
        if np.any(wealth <= 0):
            raise ValueError("initial wealth must be positive")
        beta = np.broadcast_to(np.asarray(beta, dtype=float), shape).copy()
        return cls(beta, wealth, np.ones(shape))

    def bet(self):
        return self.beta * self.wealth


def ons_hints_step(state: BettorState, loss, next_hint, hint=None) -> BettorState:
    """One round of coin-betting ONS with hints.

    ``loss`` is the coin outcome for the bet ``state.bet()``.  When ``hint`` (the
    hint in force this round) is given, ``|loss| <= hint <= next_hint`` is checked.
    """
    loss = np.asarray(loss, dtype=float)
    next_hint = np.asarray(next_hint, dtype=float)
    if hint is not None:
        hint = np.asarray(hint, dtype=float)
        _check_hint(np.abs(loss), hint)
        if np.any(next_hint < hint):
            raise ContractError("hints must be non-decreasing")
    bl = state.beta * loss
    # |beta*loss| <= 1/2 whenever the hint contract holds
    assert np.all(bl < 1.0), "betting fraction times loss reached 1"
    wealth = state.wealth - loss * state.bet()
    m = loss / (1.0 - bl)
    curvature = state.curvature_sum + m * m
    cap = 1.0 / (2.0 * next_hint)
    beta = np.clip(state.beta - ONS_GAIN * m / curvature, -cap, cap)
    return BettorState(beta, wealth, curvature)


def ons_regret_bound(comparator_mag, initial_wealth, terminal_hint, grad_sq_sum):
    """Regret bound of coin-betting ONS with hints against comparator ``u``.

    W0 + |u| max{8h log(16|u|h e^{1/4h^2}(1+g2)^4.5),
                 2 sqrt(g2 log(4 g2^10 e^{1/2h^2} u^2 / W0^2 + 1))}
    """
    u = abs(float(comparator_mag))
    w0 = float(initial_wealth)
    h = float(terminal_hint)
    g2 = float(grad_sq_sum)
    if u == 0.0:
        return w0
    # evaluated in log space; (g2)^10 overflows for long streams
    log_first = (math.log(16 * u * h) + 1.0 / (4 * h * h) + 4.5 * math.log1p(g2))
    first = 8 * h * log_first
    if g2 > 0:
        log_inner = (math.log(4) + 10 * math.log(g2) + 1.0 / (2 * h * h)
                     + 2 * math.log(u) - 2 * math.log(w0))
        # log(e^x + 1) without overflow
        log_term = log_inner + math.log1p(math.exp(-log_inner)) if log_inner > 0 else math.log1p(math.exp(log_inner))
        second = 2 * math.sqrt(g2 * log_term)
    else:
        second = 0.0
    return w0 + u * max(first, second)


@dataclass(frozen=True)
class DirectionState:
    """Adaptive gradient descent on the unit ball."""

    point: np.ndarray
    grad_sq_sum: np.ndarray

    @classmethod
    def initial(cls, dim: int, shape=(), point=None):
        if point is None:
            p = np.zeros(tuple(shape) + (dim,))
        else:
            p = np.broadcast_to(np.asarray(point, dtype=float), tuple(shape) + (dim,)).copy()
        n = _norm(p)
        if np.any(n > 1 + 1e-12):
            raise ValueError("initial direction must lie in the unit ball")
        return cls(p, np.zeros(shape))


def project_ball(x, radius=1.0, center=None):
    """Euclidean projection onto ``{x : ||x - center|| <= radius}`` (row-wise)."""
    x = np.asarray(x, dtype=float)
    c = 0.0 if center is None else center
    off = x - c
    n = _norm(off)[..., None]
    # a rescaled point can land a few ulp outside; treat that as on the boundary so
    # projecting twice is exactly the identity
    scale = np.where(n > radius * _PROJ_SLACK, radius / np.where(n > 0, n, 1.0), 1.0)
    return c + off * scale


def unit_ball_gd_step(state: DirectionState, subgradient) -> DirectionState:
    g = np.asarray(subgradient, dtype=float)
    gss = state.grad_sq_sum + np.sum(g * g, axis=-1)
    safe = np.where(gss > 0, gss, 1.0)
    eta = np.where(gss > 0, math.sqrt(2) / (2 * np.sqrt(safe)), 0.0)
    point = project_ball(state.point - eta[..., None] * g)
    return DirectionState(point, gss)


def dimension_free_combine(scale, direction):
    """Play ``scale * direction``."""
    return np.asarray(scale)[..., None] * np.asarray(direction)


def dimension_free_route(g, direction):
    """Split feedback: the scalar coin ``<g, y>`` for the scale learner, ``g`` for the direction."""
    return np.sum(np.asarray(g) * direction, axis=-1), g


def gradient_clip(hint: HintState, raw):
    """Clip ``raw`` to the hint in force and return ``(clipped, advanced hint)``."""
    raw = np.asarray(raw, dtype=float)
    h = hint.value
    if hint.mode == "scalar":
        n = _norm(raw)
        over = n > h
        factor = np.where(over, h / np.where(over, n, 1.0), 1.0)
        clipped = raw * factor[..., None]
    else:
        clipped = np.where(np.abs(raw) > h, h * np.sign(raw), raw)
    return clipped, hint.advance(raw)


@dataclass(frozen=True)
class FeasibleSet:
    """Closed l2 ball."""

    radius: float = 100.0
    center: Optional[np.ndarray] = None
    shape: str = "l2-ball"

    def __post_init__(self):
        if self.shape != "l2-ball":
            raise ValueError("only l2-ball feasible sets are supported")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def radius_inf(self) -> float:
        return self.radius

    def project(self, x):
        return project_ball(x, self.radius, self.center)

    def contains(self, x, tol=1e-9):
        c = 0.0 if self.center is None else self.center
        return _norm(np.asarray(x) - c) <= self.radius * (1 + tol)


def constraint_set_reduce(feasible: FeasibleSet, proposed, clipped_grad):
    """Project ``proposed`` and build the surrogate subgradient for the unconstrained learner.

    Returns ``(played, fed)``.
    """
    proposed = np.asarray(proposed, dtype=float)
    g = np.asarray(clipped_grad, dtype=float)
    played = feasible.project(proposed)
    diff = proposed - played
    dist = _norm(diff)
    safe = np.where(dist > 0, dist, 1.0)[..., None]
    w_tilde = diff / safe
    g_dot = np.sum(g * w_tilde, axis=-1)
    penalise = (dist > 0) & (np.sum(g * diff, axis=-1) < 0)
    fed = np.where(penalise[..., None], g - g_dot[..., None] * w_tilde, g)
    return played, fed


# ---------------------------------------------------------------------------
# unconstrained learners taking hints


class PF:
    """Dimension-free learner: ONS-with-hints scale times adaptive-GD direction."""

    hint_mode = "scalar"

    def __init__(self, dim: int, initial_wealth=1.0, initial_hint=1.0, shape=(),
                 direction=None, beta=0.0, check_norm=True):
        self.dim = dim
        # inside PF+ the first hint can sit below ||g||; only the coin is checked there
        self.check_norm = check_norm
        self.shape = tuple(shape)
        self.bettor = BettorState.initial(initial_wealth, self.shape, beta=beta)
        self.direction = DirectionState.initial(dim, self.shape, point=direction)
        self.hint = np.broadcast_to(np.asarray(initial_hint, dtype=float), self.shape).copy()
        if np.any(np.abs(self.bettor.beta) > 1 / (2 * self.hint) + 1e-15):
            raise ContractError("initial betting fraction exceeds 1/(2h)")

    def play(self):
        return dimension_free_combine(self.bettor.bet(), self.direction.point)

    def update(self, g, next_hint):
        if self.check_norm:
            _check_hint(_norm(g), self.hint, "subgradient norm")
        s, g = dimension_free_route(g, self.direction.point)
        self.bettor = ons_hints_step(self.bettor, s, next_hint, hint=self.hint)
        self.direction = unit_ball_gd_step(self.direction, g)
        self.hint = np.asarray(next_hint, dtype=float)


class CWPF:
    """One ONS-with-hints bettor per coordinate."""

    hint_mode = "vector"

    def __init__(self, dim: int, initial_wealth=1.0, initial_hint=1.0, shape=(), beta=0.0):
        self.dim = dim
        self.shape = tuple(shape)
        full = self.shape + (dim,)
        self.bettor = BettorState.initial(initial_wealth, full, beta=beta)
        self.hint = np.broadcast_to(np.asarray(initial_hint, dtype=float), full).copy()
        if np.any(np.abs(self.bettor.beta) > 1 / (2 * self.hint) + 1e-15):
            raise ContractError("initial betting fraction exceeds 1/(2h)")

    def play(self):
        return self.bettor.bet()

    def update(self, g, next_hint):
        next_hint = np.broadcast_to(np.asarray(next_hint, dtype=float), self.hint.shape)
        self.bettor = ons_hints_step(self.bettor, g, next_hint, hint=self.hint)
        self.hint = next_hint.copy()


class PFPlus:
    """Sum of a PF and a CW-PF iterate, both fed the same subgradient."""

    hint_mode = "vector"

    def __init__(self, dim: int, initial_wealth=1.0, initial_hint=1.0, shape=(),
                 pf: Optional[PF] = None, cwpf: Optional[CWPF] = None):
        self.dim = dim
        self.shape = tuple(shape)
        h1 = np.broadcast_to(np.asarray(initial_hint, dtype=float), self.shape + (dim,))
        if pf is None:
            pf = PF(dim, dim / 2 * initial_wealth, _norm(h1) / math.sqrt(dim), shape,
                    check_norm=False)
        if cwpf is None:
            cwpf = CWPF(dim, initial_wealth / 2, h1, shape)
        self.pf = pf
        self.cwpf = cwpf

    def play(self):
        return self.pf.play() + self.cwpf.play()

    def update(self, g, next_hint):
        next_hint = np.asarray(next_hint, dtype=float)
        self.pf.update(g, _norm(next_hint))
        self.cwpf.update(g, next_hint)


class FreeRange:
    """Scale-invariant FreeGrad with range-ratio restarts (Euclidean norm only)."""

    hint_mode = "scalar"

    def __init__(self, dim: int, initial_hint=1.0, shape=()):
        self.dim = dim
        self.shape = tuple(shape)
        h1 = np.broadcast_to(np.asarray(initial_hint, dtype=float), self.shape).copy()
        if np.any(h1 <= 0):
            raise ValueError("FreeRange needs a positive initial hint")
        self.h1 = h1
        self.hint = h1.copy()
        self.grad_sum = np.zeros(self.shape + (dim,))
        self.V = h1 ** 2
        self.R = np.full(self.shape, 2.0)

    def play(self):
        G = self.grad_sum
        gn = _norm(G)
        h, h1, V = self.hint, self.h1, self.V
        hg = h * gn
        coef = (2 * V + hg) * h1 ** 2 / (2 * (V + hg) ** 2 * np.sqrt(V)) * np.exp(gn ** 2 / (2 * V + 2 * hg))
        return -G * coef[..., None]

    def update(self, g, next_hint):
        g = np.asarray(g, dtype=float)
        gn = _norm(g)
        self.grad_sum = self.grad_sum + g
        self.V = self.V + gn ** 2
        self.R = self.R + gn / self.hint
        self.hint = np.asarray(next_hint, dtype=float) * np.ones(self.shape)
        reset = self.hint / self.h1 > self.R
        if np.any(reset):
            self.h1 = np.where(reset, self.hint, self.h1)
            self.V = np.where(reset, self.h1 ** 2, self.V)
            self.grad_sum = np.where(reset[..., None], 0.0, self.grad_sum)
            self.R = np.where(reset, 2.0, self.R)


# ---------------------------------------------------------------------------
# constrained clipping wrapper


@dataclass
class OloIterateRecord:
    step: int
    played_point: np.ndarray
    fed_subgradient: np.ndarray
    hint_after: HintState


@dataclass
class IterateTracer:
    """Writes one CSV row per step: ``step, played_0.., fed_0.., hint_0..``. Unbatched learners only."""

    stream: IO[str]
    _writer: object = field(init=False, default=None)

    def write(self, rec: OloIterateRecord):
        if self._writer is None:
            self._writer = csv.writer(self.stream)
            d = rec.played_point.shape[-1]
            hint_cols = ["hint"] if rec.hint_after.mode == "scalar" else [f"hint_{i}" for i in range(d)]
            self._writer.writerow(["step"] + [f"played_{i}" for i in range(d)]
                                  + [f"fed_{i}" for i in range(d)] + hint_cols)
        row = [rec.step, *np.ravel(rec.played_point), *np.ravel(rec.fed_subgradient),
               *np.ravel(rec.hint_after.value)]
        self._writer.writerow([repr(float(v)) if not isinstance(v, int) else v for v in row])


class ConstrainedClipping:
    """Wraps an unconstrained hinted learner into one over a feasible ball.

    Each round: project the learner's proposal, clip the observed subgradient to the
    running hint, apply the constraint-set surrogate and hand the result, together
    with the advanced hint, back to the learner.
    """

    def __init__(self, learner, feasible: FeasibleSet, eps_hat: float = 1.0,
                 tracer: Optional[IterateTracer] = None):
        self.learner = learner
        self.feasible = feasible
        self.hint = HintState.initial(learner.hint_mode, eps_hat, learner.shape,
                                      dim=learner.dim)
        self.tracer = tracer
        self.t = 0
        self._proposed = None
        self._played = None
        self.last_record: Optional[OloIterateRecord] = None

    @property
    def dim(self):
        return self.learner.dim

    def play(self):
        if self._played is None:
            self._proposed = self.learner.play()
            self._played = self.feasible.project(self._proposed)
        return self._played

    def update(self, raw):
        self.play()
        hint_now = self.hint
        clipped, self.hint = gradient_clip(hint_now, raw)
        _, fed = constraint_set_reduce(self.feasible, self._proposed, clipped)
        if hint_now.mode == "vector":
            # the surrogate can move mass across coordinates; keep each one under its hint
            fed = np.clip(fed, -hint_now.value, hint_now.value)
        self.learner.update(fed, self.hint.value)
        self.t += 1
        self.last_record = OloIterateRecord(self.t, self._played, fed, self.hint)
        if self.tracer is not None:
            self.tracer.write(self.last_record)
        self._proposed = self._played = None
        return fed
