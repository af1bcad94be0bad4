"""Closed catalog of cost models: quadratic and pseudo-Huber-smoothed convex.

Every cost is assembled from a quadratic part

    g(x) = 1/2 <G x, x> + <r, x>
    l(t, x, u) = 1/2 <Q(t) x, x> + <S(t) x, u> + 1/2 <R(t) u, u>
                 + <q(t), x> + <rho(t), u>

plus optional separable smooth-convex terms built from the pseudo-Huber
function ph(z) = sqrt(1 + z^2) - 1, whose second derivative
(1 + z^2)^(-3/2) is bounded by 1.  Restricting to this catalog keeps all
second derivatives bounded and lets derivative consistency be certified
by sampling.

All callables are vectorized: x has shape (..., n), u has shape (..., m),
values come back with shape (...), gradients with a trailing n or m axis,
and Hessian blocks with two trailing axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import StructuralError
from .grids import PiecewiseConstant, as_piecewise


def pseudo_huber(z):
    """sqrt(1 + z^2) - 1, a smooth convex proxy for |z|."""
    return np.hypot(1.0, z) - 1.0


def pseudo_huber_d1(z):
    return z / np.hypot(1.0, z)


def pseudo_huber_d2(z):
    return np.hypot(1.0, z) ** -3


@dataclass
class CostModel:
    """Evaluable cost: terminal g and running l with full derivative set.

    Dux_l(t,x,u) equals Dxu_l(t,x,u) transposed by construction; k_hess is
    the declared bound on every second-derivative entry (audited over a
    sampling box by validate_problem).
    """

    n: int
    m: int
    g: Callable
    dx_g: Callable
    dxx_g: Callable
    l: Callable
    dx_l: Callable
    du_l: Callable
    dxx_l: Callable
    dxu_l: Callable
    dux_l: Callable
    duu_l: Callable
    family: str = "quadratic"
    params: dict = field(default_factory=dict)
    k_hess: float = 1.0


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _quad_form(mat, v):
    # 1/2 <M v, v> over the trailing axis
    return 0.5 * np.einsum("...i,ij,...j->...", v, mat, v)


@dataclass
class QuadraticCostData:
    """Raw arrays of the quadratic cost family (time-indexed entries allowed)."""

    G: np.ndarray
    r: np.ndarray
    Q: PiecewiseConstant
    S: PiecewiseConstant
    R: PiecewiseConstant
    q: PiecewiseConstant
    rho: PiecewiseConstant


def _zeros_pw(shape):
    return PiecewiseConstant(np.zeros(shape))


def quadratic_cost_data(n, m, G=None, r=None, Q=None, S=None, R=None, q=None, rho=None):
    G = np.zeros((n, n)) if G is None else np.asarray(G, dtype=float).reshape(n, n)
    r = np.zeros(n) if r is None else np.asarray(r, dtype=float).reshape(n)
    Q = _zeros_pw((n, n)) if Q is None else as_piecewise(Q, (n, n))
    S = _zeros_pw((m, n)) if S is None else as_piecewise(S, (m, n))
    R = _zeros_pw((m, m)) if R is None else as_piecewise(R, (m, m))
    q = _zeros_pw((n,)) if q is None else as_piecewise(q, (n,))
    rho = _zeros_pw((m,)) if rho is None else as_piecewise(rho, (m,))
    return QuadraticCostData(G=G, r=r, Q=Q, S=S, R=R, q=q, rho=rho)


def _check_symmetric(mat, name, tol=1e-12):
    """Symmetrize, warning when the asymmetry is beyond rounding noise."""
    arr = np.asarray(mat, dtype=float)
    defect = float(np.max(np.abs(arr - arr.T))) if arr.size else 0.0
    if defect > tol:
        import warnings

        warnings.warn(f"{name} asymmetry {defect:.2e} exceeds {tol:.0e}; symmetrizing")
    return 0.5 * (arr + arr.T)


def _smooth_terms(kappa_x, kappa_u, kappa_g):
    """Separable pseudo-Huber contributions and their derivative closures."""

    def g_s(x):
        return kappa_g * pseudo_huber(x).sum(axis=-1)

    def dxg_s(x):
        return kappa_g * pseudo_huber_d1(x)

    def dxxg_s(x):
        d2 = kappa_g * pseudo_huber_d2(x)
        out = np.zeros(x.shape + (x.shape[-1],))
        idx = np.arange(x.shape[-1])
        out[..., idx, idx] = d2
        return out

    def lx_terms(x):
        return kappa_x * pseudo_huber(x).sum(axis=-1)

    def lu_terms(u):
        return kappa_u * pseudo_huber(u).sum(axis=-1)

    def diag_hess(z, kappa):
        d2 = kappa * pseudo_huber_d2(z)
        out = np.zeros(z.shape + (z.shape[-1],))
        idx = np.arange(z.shape[-1])
        out[..., idx, idx] = d2
        return out

    return g_s, dxg_s, dxxg_s, lx_terms, lu_terms, diag_hess


def build_cost(
    n,
    m,
    quad: QuadraticCostData,
    kappa_x=0.0,
    kappa_u=0.0,
    kappa_g=0.0,
    delta_u=0.0,
    delta_g=0.0,
    family="quadratic",
    params=None,
):
    """Assemble a CostModel from quadratic data plus smooth catalog terms.

    delta_u adds (delta_u/2)|u|^2 to l; delta_g adds (delta_g/2)|x|^2 to g.
    They are kept separate from Q/R so the certificate's modulus is visible
    in the construction.
    """
    G = _check_symmetric(quad.G, "G")
    r = np.asarray(quad.r, dtype=float)
    g_s, dxg_s, dxxg_s, lx_terms, lu_terms, diag_hess = _smooth_terms(kappa_x, kappa_u, kappa_g)
    eye_n = np.eye(n)
    eye_m = np.eye(m)

    def g(x):
        x = np.asarray(x, dtype=float)
        val = _quad_form(G, x) + x @ r + 0.5 * delta_g * (x * x).sum(axis=-1)
        return val + g_s(x)

    def dx_g(x):
        x = np.asarray(x, dtype=float)
        return x @ G.T + r + delta_g * x + dxg_s(x)

    def dxx_g(x):
        x = np.asarray(x, dtype=float)
        base = G + delta_g * eye_n
        return np.broadcast_to(base, x.shape + (n,)).copy() + dxxg_s(x)

    def _qsr(t):
        return quad.Q.at(t), quad.S.at(t), quad.R.at(t), quad.q.at(t), quad.rho.at(t)

    def l(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        Qt, St, Rt, qt, rhot = _qsr(t)
        val = (
            _quad_form(Qt, x)
            + np.einsum("...i,ij,...j->...", u, St, x)
            + _quad_form(Rt, u)
            + x @ qt
            + u @ rhot
            + 0.5 * delta_u * (u * u).sum(axis=-1)
        )
        return val + lx_terms(x) + lu_terms(u)

    def dx_l(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        Qt, St, _, qt, _ = _qsr(t)
        return x @ Qt.T + u @ St + qt + kappa_x * pseudo_huber_d1(x)

    def du_l(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        _, St, Rt, _, rhot = _qsr(t)
        return x @ St.T + u @ Rt.T + rhot + delta_u * u + kappa_u * pseudo_huber_d1(u)

    def dxx_l(t, x, u):
        x = np.asarray(x, dtype=float)
        Qt = _qsr(t)[0]
        return np.broadcast_to(Qt, x.shape + (n,)).copy() + diag_hess(x, kappa_x)

    def dxu_l(t, x, u):
        x = np.asarray(x, dtype=float)
        St = _qsr(t)[1]
        return np.broadcast_to(St.T, x.shape[:-1] + (n, m)).copy()

    def dux_l(t, x, u):
        x = np.asarray(x, dtype=float)
        St = _qsr(t)[1]
        return np.broadcast_to(St, x.shape[:-1] + (m, n)).copy()

    def duu_l(t, x, u):
        u = np.asarray(u, dtype=float)
        Rt = _qsr(t)[2]
        base = Rt + delta_u * eye_m
        return np.broadcast_to(base, u.shape + (m,)).copy() + diag_hess(u, kappa_u)

    def _bound(pw):
        return float(np.max(np.abs(pw.values))) if pw.values.size else 0.0

    k_hess = max(
        float(np.max(np.abs(G))) + delta_g + kappa_g,
        _bound(quad.Q) + kappa_x,
        _bound(quad.R) + delta_u + kappa_u,
        _bound(quad.S),
        1e-12,
    )
    return CostModel(
        n=n,
        m=m,
        g=g,
        dx_g=dx_g,
        dxx_g=dxx_g,
        l=l,
        dx_l=dx_l,
        du_l=du_l,
        dxx_l=dxx_l,
        dxu_l=dxu_l,
        dux_l=dux_l,
        duu_l=duu_l,
        family=family,
        params=dict(params or {}),
        k_hess=k_hess,
    )


class GridCost:
    """Step-indexed view of a CostModel on a fixed grid.

    This is the interface the backward solver and the descent loop consume:
    everything keyed by step index k, vectorized over an ensemble axis.
    """

    def __init__(self, cost: CostModel, grid):
        self.cost = cost
        self.grid = grid

    def terminal_value(self, xT):
        return self.cost.g(xT)

    def terminal_gradient(self, xT):
        return self.cost.dx_g(xT)

    def running_value(self, k, x, u):
        return self.cost.l(float(self.grid.nodes[k]), x, u)

    def running_grad_x(self, k, x, u):
        return self.cost.dx_l(float(self.grid.nodes[k]), x, u)

    def running_grad_u(self, k, x, u):
        return self.cost.du_l(float(self.grid.nodes[k]), x, u)


def check_psd(mat, shift=0.0, tol=1e-10):
    """Smallest eigenvalue of sym(mat) - shift*I; psd iff return >= -tol."""
    mat = _sym(np.asarray(mat, dtype=float))
    w = np.linalg.eigvalsh(mat)
    return float(w[0] - shift)


def stacked_hessian(cost: CostModel, t, x, u):
    """The (n+m) x (n+m) second derivative of l at one point."""
    n, m = cost.n, cost.m
    H = np.zeros((n + m, n + m))
    H[:n, :n] = cost.dxx_l(t, x, u)
    H[:n, n:] = cost.dxu_l(t, x, u)
    H[n:, :n] = cost.dux_l(t, x, u)
    H[n:, n:] = cost.duu_l(t, x, u)
    return H


def quadratic_cost(n, m, **kwargs):
    """Pure quadratic cost; kwargs as in quadratic_cost_data."""
    data = quadratic_cost_data(n, m, **kwargs)
    params = {k: v for k, v in kwargs.items() if v is not None}
    return build_cost(n, m, data, family="quadratic", params=params), data


def case1_smooth_cost(n, m, delta, kappa_x=0.0, kappa_u=0.0, kappa_g=0.0, quad_extra=None):
    """Running cost (delta/2)|u|^2 + smoothed convex terms, convex terminal.

    The optional extra quadratic block must be psd so the shifted joint
    Hessian stays psd with modulus delta.
    """
    if delta <= 0:
        raise StructuralError("delta must be positive")
    if min(kappa_x, kappa_u, kappa_g) < 0:
        raise StructuralError("kappa weights must be nonnegative")
    data = quadratic_cost_data(n, m, **(quad_extra or {}))
    probe_ts = sorted({0.0}.union(*(
        set(pw.times.tolist()) for pw in (data.Q, data.S, data.R) if not pw.is_constant
    ))) if any(not pw.is_constant for pw in (data.Q, data.S, data.R)) else [0.0]
    for t in probe_ts:
        joint = np.zeros((n + m, n + m))
        joint[:n, :n] = data.Q.at(t)
        joint[n:, :n] = data.S.at(t)
        joint[:n, n:] = data.S.at(t).T
        joint[n:, n:] = data.R.at(t)
        if check_psd(joint) < -1e-10:
            raise StructuralError("extra quadratic block of a case1 cost must be psd")
    if check_psd(data.G) < -1e-10:
        raise StructuralError("extra terminal block of a case1 cost must be psd")
    params = {"delta": delta, "kappa_x": kappa_x, "kappa_u": kappa_u, "kappa_g": kappa_g}
    return build_cost(
        n, m, data, kappa_x=kappa_x, kappa_u=kappa_u, kappa_g=kappa_g,
        delta_u=delta, family="case1_smooth", params=params,
    )


def case2_smooth_cost(n, m, delta, kappa_g=0.0, kappa_x=0.0, kappa_u=0.0, r_u=0.0):
    """Terminal (delta/2)|x|^2 + smooth convex; running cost merely convex.

    Uniform convexity then has to come from the control entering the
    diffusion, which the builder of the enclosing problem checks via
    D(t)^T D(t) >= delta I.
    """
    if delta <= 0:
        raise StructuralError("delta must be positive")
    if min(kappa_g, kappa_x, kappa_u, r_u) < 0:
        raise StructuralError("weights must be nonnegative")
    data = quadratic_cost_data(n, m, R=r_u * np.eye(m))
    params = {"delta": delta, "kappa_g": kappa_g, "kappa_x": kappa_x, "kappa_u": kappa_u, "r_u": r_u}
    return build_cost(
        n, m, data, kappa_x=kappa_x, kappa_u=kappa_u, kappa_g=kappa_g,
        delta_g=delta, family="case2_smooth", params=params,
    )
