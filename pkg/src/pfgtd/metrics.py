"""Closed-form ground truth: A, b, C, state distribution, saddle point, RMSPBE,
duality gap, plus SMAPE and discounted returns for prediction streams."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .envs import MdpSpec

_EIG_RTOL = 1e-10
GAP_NEG_TOL = 1e-9


class AssumptionViolation(ValueError):
    """Raised when A or C is singular and the caller asked for strict checking."""


def _rowmat(x, mat):
    """``x @ mat`` row by row; einsum keeps each row's result independent of the batch size."""
    return np.einsum("...i,ij->...j", x, mat)


def _pinv_apply(evals, evecs, x, cut):
    inv = np.where(evals > cut, 1.0 / np.where(evals > cut, evals, 1.0), 0.0)
    return _rowmat(_rowmat(x, evecs) * inv, evecs.T)


@dataclass(frozen=True)
class ExactModel:
    """Expected-update matrices of an MDP/policy pair.

    When ``M`` is singular (Baird: 8 features, 7 states) the inverse is the
    Moore-Penrose pseudo-inverse; ``b - A theta`` lies in the range of ``C`` so
    the objective is unaffected.
    """

    A: np.ndarray
    b: np.ndarray
    C: np.ndarray
    M: np.ndarray
    xi: np.ndarray
    theta_star: np.ndarray
    y_star: np.ndarray
    lambda_max_M: float
    objective: str
    singular: bool
    _m_evals: np.ndarray
    _m_evecs: np.ndarray

    @property
    def dim(self):
        return self.b.shape[0]

    def m_inv_apply(self, x):
        cut = _EIG_RTOL * max(self.lambda_max_M, 1e-300)
        return _pinv_apply(self._m_evals, self._m_evecs, np.asarray(x, float), cut)

    def lagrangian(self, theta, y):
        theta = np.asarray(theta, float)
        y = np.asarray(y, float)
        resid = self.b - _rowmat(theta, self.A.T)
        return np.sum(resid * y, axis=-1) - 0.5 * np.sum(_rowmat(y, self.M) * y, axis=-1)

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "C": self.C.tolist(),
            "M": self.M.tolist(),
            "xi": self.xi.tolist(),
            "theta_star": self.theta_star.tolist(),
            "y_star": self.y_star.tolist(),
            "lambda_max_M": self.lambda_max_M,
            "singular": self.singular,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def state_distribution(spec: MdpSpec) -> np.ndarray:
    """Distribution of the state a transition is emitted from.

    Trajectory sampling: stationary law of the behavior chain where entering a
    terminal state jumps to the start distribution.  IID sampling: the start law.
    """
    if spec.sampling == "iid":
        return spec.start_dist.copy()
    P = np.einsum("sa,sat->st", spec.behavior, spec.transition)
    to_term = P[:, spec.terminal].sum(axis=1)
    P = P.copy()
    P[:, spec.terminal] = 0.0
    P += np.outer(to_term, spec.start_dist)
    keep = ~spec.terminal
    Q = P[np.ix_(keep, keep)]
    n = Q.shape[0]
    # xi (Q - I) = 0, sum xi = 1
    lhs = np.vstack([(Q - np.eye(n)).T, np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    sol = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    sol = np.clip(sol, 0.0, None)
    xi = np.zeros(spec.n_states)
    xi[keep] = sol / sol.sum()
    return xi


def build_exact_model(spec: MdpSpec, objective: str = "mspbe", strict: bool = False) -> ExactModel:
    objective = objective.lower()
    if objective not in ("mspbe", "neu"):
        raise ValueError(f"unknown objective {objective!r}")
    xi = state_distribution(spec)
    Phi = spec.features
    # target-policy expectations; pi_b * rho == pi wherever pi_b > 0
    P_pi = np.einsum("sa,sat->st", spec.target, spec.transition)
    r_pi = np.sum(spec.target * spec.reward, axis=1)
    W = Phi * xi[:, None]
    A = W.T @ (Phi - spec.gamma * P_pi @ Phi)
    b = W.T @ r_pi
    C = W.T @ Phi
    C = 0.5 * (C + C.T)
    M = C if objective == "mspbe" else np.eye(spec.dim)

    d = spec.dim
    singular = (np.linalg.matrix_rank(A) < d) or (np.linalg.matrix_rank(C) < d)
    if singular and strict:
        raise AssumptionViolation(f"{spec.name}: A or C is singular (non-singularity assumption fails)")
    if singular:
        theta_star = np.linalg.pinv(A) @ b
    else:
        theta_star = np.linalg.solve(A, b)
    evals, evecs = np.linalg.eigh(M)
    evals = np.clip(evals, 0.0, None)
    lam = float(evals.max())
    cut = _EIG_RTOL * lam
    y_star = _pinv_apply(evals, evecs, b - A @ theta_star, cut)
    return ExactModel(A, b, C, M, xi, theta_star, y_star, lam, objective, bool(singular),
                      evals, evecs)


def rmspbe(model: ExactModel, theta) -> np.ndarray:
    """sqrt((b - A theta)^T M^-1 (b - A theta)), row-wise over leading dims."""
    theta = np.asarray(theta, float)
    resid = model.b - _rowmat(theta, model.A.T)
    val = np.sum(model.m_inv_apply(resid) * resid, axis=-1)
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.clip(val, 0.0, None))


def _max_over_ball(model: ExactModel, c, radius):
    """max_{||y|| <= D} <c, y> - 1/2 y^T M y, solved as a trust-region problem."""
    evals, evecs = model._m_evals, model._m_evecs
    cut = _EIG_RTOL * max(model.lambda_max_M, 1e-300)
    ct = evecs.T @ c
    in_range = np.all(np.abs(ct[evals <= cut]) <= 1e-12 * max(1.0, np.abs(ct).max()))
    if in_range:
        y = _pinv_apply(evals, evecs, c, cut)
        if np.linalg.norm(y) <= radius:
            return float(c @ y - 0.5 * y @ model.M @ y)

    def norm_gap(lam):
        return np.linalg.norm(ct / (evals + lam)) - radius

    hi = max(1.0, np.linalg.norm(c) / radius)
    while norm_gap(hi) > 0:
        hi *= 2
    lo = hi
    while norm_gap(lo) < 0 and lo > 1e-300:
        lo /= 2
    lam = brentq(norm_gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    y = evecs @ (ct / (evals + lam))
    y *= min(1.0, radius / np.linalg.norm(y))
    return float(c @ y - 0.5 * y @ model.M @ y)


def duality_gap(model: ExactModel, theta, y, radius: float = 100.0) -> np.ndarray:
    """max_y L(theta, y) - min_theta L(theta, y) over l2 balls of radius D.

    Accepts batches (leading dims).  Inputs outside the balls raise.
    """
    theta = np.atleast_2d(np.asarray(theta, float))
    y = np.atleast_2d(np.asarray(y, float))
    tol = radius * (1 + 1e-9)
    if np.any(np.linalg.norm(theta, axis=-1) > tol) or np.any(np.linalg.norm(y, axis=-1) > tol):
        raise ValueError("duality gap requested outside the feasible balls")
    out = np.empty(theta.shape[0])
    for i, (th, yy) in enumerate(zip(theta, y)):
        upper = _max_over_ball(model, model.b - model.A @ th, radius)
        lower = model.b @ yy - 0.5 * yy @ model.M @ yy - radius * np.linalg.norm(model.A.T @ yy)
        gap = upper - lower
        if gap < 0:
            if gap < -GAP_NEG_TOL * max(1.0, abs(upper)):
                raise ArithmeticError(f"negative duality gap {gap:.3e}")
            gap = 0.0
        out[i] = gap
    return out


def smape(predictions, returns) -> float:
    """Symmetric mean absolute percentage error in [0, 1]; 0/0 terms count as 0."""
    v = np.asarray(predictions, float)
    g = np.asarray(returns, float)
    if v.shape != g.shape:
        raise ValueError("prediction and return streams differ in length")
    if v.size == 0:
        raise ValueError("SMAPE of an empty stream")
    den = np.abs(g) + np.abs(v)
    num = np.abs(v - g)
    terms = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(terms.mean())


def smape_terms(predictions, returns) -> np.ndarray:
    v = np.asarray(predictions, float)
    g = np.asarray(returns, float)
    den = np.abs(g) + np.abs(v)
    return np.where(den > 0, np.abs(v - g) / np.where(den > 0, den, 1.0), 0.0)


def true_returns(rewards, gamma: float):
    """G_t = sum_k gamma^k r_{t+k} by a backward pass (axis 0 is time).

    The stream is truncated at its end, so element ``t`` may be off by at most
    ``gamma^(T-t) * r_max / (1 - gamma)``; see :func:`truncation_bound`.
    """
    r = np.asarray(rewards, float)
    G = np.empty_like(r)
    acc = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        acc = r[t] + gamma * acc
        G[t] = acc
    return G


def truncation_bound(n_steps: int, gamma: float, r_max: float) -> np.ndarray:
    t = np.arange(n_steps)
    if gamma >= 1:
        return np.full(n_steps, np.inf)
    return gamma ** (n_steps - t) * r_max / (1 - gamma)


def lambda_max_power(M: np.ndarray, iters: int = 10000, tol: float = 1e-14,
                     seed: Optional[int] = 0) -> float:
    """Power-iteration estimate of the top eigenvalue of a PSD matrix."""
    v = np.random.default_rng(seed).standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        new = float(v @ w)
        n = np.linalg.norm(w)
        if n == 0:
            return 0.0
        v = w / n
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam
