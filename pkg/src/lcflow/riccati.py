"""Ground-truth oracle for deterministic-coefficient LQ problems.

Backward matrix Riccati ODE with affine and scalar companion terms, solved
by classical RK4 on a refinement of the solver grid.  The companion ODEs
are obtained by substituting the quadratic ansatz

    V(t, x) = 1/2 <P(t) x, x> + <phi(t), x> + c(t)

into the dynamic-programming PDE of the control problem; the hjb residual
check doubles as the unit test of that derivation.  With

    K(t)  = R + sum_i D_i^T P D_i          (m x m, kept >= delta I)
    Mx(t) = B^T P + sum_i D_i^T P C_i + S  (m x n)
    mv(t) = B^T phi + sum_i D_i^T P sigma_i + rho

the feedback is u = Theta x + theta, Theta = -K^{-1} Mx, theta = -K^{-1} mv,
and the backward ODEs read

    P'   = -(P A + A^T P + sum C_i^T P C_i + Q - Mx^T K^{-1} Mx)
    phi' = -(A^T phi + P b + sum C_i^T P sigma_i + q - Mx^T K^{-1} mv)
    c'   = -(<phi, b> + 1/2 sum <P sigma_i, sigma_i> - 1/2 <K^{-1} mv, mv>)

with P(T) = G, phi(T) = r, c(T) = 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import LcflowError, StructuralError
from .grids import TimeGrid, as_piecewise

if TYPE_CHECKING:
    from .problem import CoefficientSet


@dataclass(frozen=True)
class LQData:
    """Quadratic cost data together with the dynamics it rides on."""

    horizon: float
    coeffs: "CoefficientSet"
    G: np.ndarray
    r: np.ndarray
    Q: object
    S: object
    R: object
    q: object
    rho: object


class RiccatiSingularError(LcflowError):
    """R + sum D^T P D lost positivity during the backward sweep."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


@dataclass
class RiccatiSolution:
    """P, phi, c and the feedback gains on a refined copy of the grid."""

    grid: TimeGrid
    times: np.ndarray          # refined, ascending, times[0] = t0, times[-1] = T
    P: np.ndarray              # [K+1, n, n]
    phi: np.ndarray            # [K+1, n]
    c: np.ndarray              # [K+1]
    theta_gain: np.ndarray     # [K+1, m, n]
    theta_offset: np.ndarray   # [K+1, m]
    regular_margin_min: float = np.inf

    def _locate(self, t):
        t0, T = float(self.times[0]), float(self.times[-1])
        if t < t0 - 1e-12 or t > T + 1e-12:
            raise ValueError(f"t={t} outside [{t0}, {T}]")
        t = min(max(t, t0), T)
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        j = min(max(j, 0), len(self.times) - 2)
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return j, w

    def _interp(self, arr, t):
        j, w = self._locate(t)
        return (1.0 - w) * arr[j] + w * arr[j + 1]

    def P_at(self, t):
        return self._interp(self.P, t)

    def phi_at(self, t):
        return self._interp(self.phi, t)

    def c_at(self, t):
        return float(self._interp(self.c, t))

    def gain_at(self, t):
        return self._interp(self.theta_gain, t), self._interp(self.theta_offset, t)


def _sym(mat):
    return 0.5 * (mat + mat.T)


def _freeze(coeffs, pws, t):
    """Coefficient and cost matrices at time t (right-continuous)."""
    Qpw, Spw, Rpw, qpw, rhopw = pws
    return (
        coeffs.A.at(t), coeffs.B.at(t), coeffs.C.at(t), coeffs.D.at(t),
        coeffs.b.at(t), coeffs.sigma.at(t),
        Qpw.at(t), Spw.at(t), Rpw.at(t), qpw.at(t), rhopw.at(t),
    )


def _kmat(Rt, D, P):
    return Rt + np.einsum("inm,nj,ijk->mk", D, P, D)


def _rk4(rhs, state, h, substeps):
    """Generic RK4 over one frozen-coefficient interval; state is a tuple."""
    P, phi, c = state
    for _ in range(substeps):
        k1 = rhs(P, phi, c)
        k2 = rhs(P + 0.5 * h * k1[0], phi + 0.5 * h * k1[1], c + 0.5 * h * k1[2])
        k3 = rhs(P + 0.5 * h * k2[0], phi + 0.5 * h * k2[1], c + 0.5 * h * k2[2])
        k4 = rhs(P + h * k3[0], phi + h * k3[1], c + h * k3[2])
        P = _sym(P + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        phi = phi + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        c = c + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        yield P, phi, c


def solve_riccati_ode(lq: LQData, coeffs=None, grid: TimeGrid = None, substeps: int = 4) -> RiccatiSolution:
    """Integrate the Riccati system backward with RK4 sub-stepping.

    Coefficients are frozen per grid interval (left node, right-continuous),
    so each interval's right-hand side is smooth and RK4 keeps the oracle
    error negligible next to Monte Carlo error.  P is symmetrized after
    every step; values are stored at sub-step resolution so interpolated
    lookups stay smooth.
    """
    if grid is None:
        raise ValueError("grid is required")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    coeffs = lq.coeffs if coeffs is None else coeffs
    dims = coeffs.dims
    n, m = dims.n, dims.m

    G = _sym(np.asarray(lq.G, dtype=float).reshape(n, n))
    r = np.asarray(lq.r, dtype=float).reshape(n)
    pws = (
        as_piecewise(lq.Q, (n, n)), as_piecewise(lq.S, (m, n)), as_piecewise(lq.R, (m, m)),
        as_piecewise(lq.q, (n,)), as_piecewise(lq.rho, (m,)),
    )

    K_total = grid.N * substeps
    times = np.empty(K_total + 1)
    P_out = np.empty((K_total + 1, n, n))
    phi_out = np.empty((K_total + 1, n))
    c_out = np.empty(K_total + 1)
    th_out = np.empty((K_total + 1, m, n))
    to_out = np.empty((K_total + 1, m))
    margin = [np.inf]

    def make_rhs(frozen, t_stamp):
        A, B, C, D, b, sigma, Qt, St, Rt, qt, rhot = frozen

        def rhs(P, phi, c):
            Kmat = _kmat(Rt, D, P)
            w = np.linalg.eigvalsh(_sym(Kmat))
            margin[0] = min(margin[0], float(w[0]))
            if w[0] < 1e-12:
                raise RiccatiSingularError(
                    f"R + D^T P D lost positivity (min eig {w[0]:.3e}) near t={t_stamp:.6g}",
                    t=t_stamp,
                )
            Mx = B.T @ P + np.einsum("inm,nj,ijk->mk", D, P, C) + St
            mv = B.T @ phi + np.einsum("inm,nj,ij->m", D, P, sigma) + rhot
            Kinv_Mx = np.linalg.solve(Kmat, Mx)
            Kinv_mv = np.linalg.solve(Kmat, mv)
            dP = -(P @ A + A.T @ P + np.einsum("ijn,jk,ikl->nl", C, P, C) + Qt - Mx.T @ Kinv_Mx)
            dphi = -(A.T @ phi + P @ b + np.einsum("ijn,jk,ik->n", C, P, sigma) + qt - Mx.T @ Kinv_mv)
            dc = -(float(phi @ b) + 0.5 * float(np.einsum("ij,jk,ik->", sigma, P, sigma))
                   - 0.5 * float(mv @ Kinv_mv))
            return _sym(dP), dphi, dc

        def gains(P, phi):
            Kmat = _kmat(Rt, D, P)
            Mx = B.T @ P + np.einsum("inm,nj,ijk->mk", D, P, C) + St
            mv = B.T @ phi + np.einsum("inm,nj,ij->m", D, P, sigma) + rhot
            return -np.linalg.solve(Kmat, Mx), -np.linalg.solve(Kmat, mv)

        return rhs, gains

    P, phi, c = G.copy(), r.copy(), 0.0
    idx = K_total
    times[idx] = grid.T
    P_out[idx], phi_out[idx], c_out[idx] = P, phi, c

    last_frozen = _freeze(coeffs, pws, float(grid.nodes[grid.N - 1]))
    Kterm = _kmat(last_frozen[8], last_frozen[3], G)
    if np.linalg.eigvalsh(_sym(Kterm))[0] < 1e-12:
        raise RiccatiSingularError("R + D^T G D is singular at the terminal time", t=grid.T)
    _, gains_fn = make_rhs(last_frozen, grid.T)
    th_out[idx], to_out[idx] = gains_fn(P, phi)

    for k in range(grid.N - 1, -1, -1):
        t_left = float(grid.nodes[k])
        frozen = _freeze(coeffs, pws, t_left)
        rhs, gains_fn = make_rhs(frozen, t_left)
        h = -(float(grid.nodes[k + 1]) - t_left) / substeps
        t_cur = float(grid.nodes[k + 1])
        for P, phi, c in _rk4(rhs, (P, phi, c), h, substeps):
            t_cur += h
            idx -= 1
            times[idx] = t_cur
            P_out[idx], phi_out[idx], c_out[idx] = P, phi, c
            th_out[idx], to_out[idx] = gains_fn(P, phi)
    times[0] = grid.t0

    return RiccatiSolution(
        grid=grid, times=times, P=P_out, phi=phi_out, c=c_out,
        theta_gain=th_out, theta_offset=to_out, regular_margin_min=float(margin[0]),
    )


def lq_value(ric: RiccatiSolution, t: float, x) -> tuple:
    """(V, DxV, DxxV) of the quadratic value at (t, x)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    P = ric.P_at(t)
    phi = ric.phi_at(t)
    c = ric.c_at(t)
    V = 0.5 * float(x @ P @ x) + float(phi @ x) + c
    return V, P @ x + phi, P


def lq_value_batch(ric: RiccatiSolution, t: float, X: np.ndarray) -> np.ndarray:
    """Vectorized V(t, x) over the rows of X."""
    P = ric.P_at(t)
    phi = ric.phi_at(t)
    c = ric.c_at(t)
    return 0.5 * np.einsum("pi,ij,pj->p", X, P, X) + X @ phi + c


def lq_optimal_trajectory(ric: RiccatiSolution, coeffs, grid: TimeGrid, x0, W, lq: LQData = None):
    """Closed-loop simulation under the oracle feedback u = Theta x + theta.

    Returns the trajectory, the control and the Monte Carlo cost estimated
    with the quadratic cost data (taken from lq, if given, else rebuilt from
    the Riccati input is not possible, so lq is required for the cost).
    """
    from .paths import ClosedLoopResult, ControlEnsemble, StateEnsemble, _euler_step, mc_stderr
    from .problem import materialize

    sc = materialize(coeffs, grid)
    M = W.M
    n = sc.A.shape[1]
    m = sc.B.shape[2]
    X = np.empty((M, grid.N + 1, n))
    U = np.empty((M, grid.N, m))
    X[:, 0] = np.asarray(x0, dtype=float).reshape(n)
    dt = grid.dt
    for k in range(grid.N):
        Theta, theta = ric.gain_at(float(grid.nodes[k]))
        U[:, k] = X[:, k] @ Theta.T + theta
        X[:, k + 1] = _euler_step(sc, k, X[:, k], U[:, k], W.increments[:, k], dt)
    states = StateEnsemble(grid=grid, values=X)
    controls = ControlEnsemble(grid=grid, values=U, producer="riccati_feedback")
    if lq is None:
        raise ValueError("lq data is required to evaluate the trajectory cost")
    per_path = _lq_per_path_cost(lq, grid, X, U)
    cost = float(per_path.mean())
    return ClosedLoopResult(states=states, controls=controls, cost=cost,
                            per_path_cost=per_path, stderr=mc_stderr(per_path, W.antithetic))


def _lq_per_path_cost(lq: LQData, grid: TimeGrid, X, U):
    n = X.shape[2]
    m = U.shape[2]
    G = _sym(np.asarray(lq.G, dtype=float).reshape(n, n))
    r = np.asarray(lq.r, dtype=float).reshape(n)
    pws = (
        as_piecewise(lq.Q, (n, n)), as_piecewise(lq.S, (m, n)), as_piecewise(lq.R, (m, m)),
        as_piecewise(lq.q, (n,)), as_piecewise(lq.rho, (m,)),
    )
    XT = X[:, -1]
    total = 0.5 * np.einsum("pi,ij,pj->p", XT, G, XT) + XT @ r
    dt = grid.dt
    for k in range(grid.N):
        t = float(grid.nodes[k])
        Qt, St, Rt, qt, rhot = (pw.at(t) for pw in pws)
        xk, uk = X[:, k], U[:, k]
        lk = (
            0.5 * np.einsum("pi,ij,pj->p", xk, Qt, xk)
            + np.einsum("pi,ij,pj->p", uk, St, xk)
            + 0.5 * np.einsum("pi,ij,pj->p", uk, Rt, uk)
            + xk @ qt + uk @ rhot
        )
        total = total + lk * dt
    return total


def lq_policy_value(lq: LQData, coeffs, grid: TimeGrid, Theta, theta=None, substeps: int = 4):
    """Quadratic value of the fixed affine policy u = Theta x + theta.

    No minimization is involved: with the policy substituted, the closed
    loop is an affine SDE with quadratic running cost, so the value solves
    linear Lyapunov-type ODEs.  Used as the oracle for perturbed-feedback
    suboptimality checks.
    """
    dims = coeffs.dims
    n, m = dims.n, dims.m
    Theta = np.asarray(Theta, dtype=float).reshape(m, n)
    theta = np.zeros(m) if theta is None else np.asarray(theta, dtype=float).reshape(m)
    G = _sym(np.asarray(lq.G, dtype=float).reshape(n, n))
    r = np.asarray(lq.r, dtype=float).reshape(n)
    pws = (
        as_piecewise(lq.Q, (n, n)), as_piecewise(lq.S, (m, n)), as_piecewise(lq.R, (m, m)),
        as_piecewise(lq.q, (n,)), as_piecewise(lq.rho, (m,)),
    )

    P, phi, c = G.copy(), r.copy(), 0.0
    for k in range(grid.N - 1, -1, -1):
        t_left = float(grid.nodes[k])
        A, B, C, D, b, sigma, Qt, St, Rt, qt, rhot = _freeze(coeffs, pws, t_left)
        Abar = A + B @ Theta
        Cbar = C + np.einsum("inm,mk->ink", D, Theta)
        bbar = b + B @ theta
        sbar = sigma + np.einsum("inm,m->in", D, theta)
        Qbar = _sym(Qt + Theta.T @ St + St.T @ Theta + Theta.T @ Rt @ Theta)
        qbar = St.T @ theta + Theta.T @ (Rt @ theta) + qt + Theta.T @ rhot
        cbar = 0.5 * float(theta @ Rt @ theta) + float(rhot @ theta)

        def rhs(P, phi, c):
            dP = -(P @ Abar + Abar.T @ P + np.einsum("ijn,jk,ikl->nl", Cbar, P, Cbar) + Qbar)
            dphi = -(Abar.T @ phi + P @ bbar + np.einsum("ijn,jk,ik->n", Cbar, P, sbar) + qbar)
            dc = -(float(phi @ bbar) + 0.5 * float(np.einsum("ij,jk,ik->", sbar, P, sbar)) + cbar)
            return _sym(dP), dphi, dc

        h = -(float(grid.nodes[k + 1]) - t_left) / substeps
        for P, phi, c in _rk4(rhs, (P, phi, c), h, substeps):
            pass

    def value(x):
        x = np.asarray(x, dtype=float).reshape(n)
        return 0.5 * float(x @ P @ x) + float(phi @ x) + c

    return value, (P, phi, c)


def lqdata_from_spec(spec) -> LQData:
    """Extract LQData from a quadratic-family ProblemSpec."""
    if spec.cost.family != "quadratic":
        raise StructuralError(f"spec cost family {spec.cost.family!r} is not quadratic")
    p = spec.cost.params
    n, m = spec.dims.n, spec.dims.m
    return LQData(
        horizon=spec.horizon, coeffs=spec.coeffs,
        G=np.asarray(p.get("G", np.zeros((n, n))), dtype=float),
        r=np.asarray(p.get("r", np.zeros(n)), dtype=float),
        Q=np.asarray(p.get("Q", np.zeros((n, n))), dtype=float),
        S=np.asarray(p.get("S", np.zeros((m, n))), dtype=float),
        R=np.asarray(p.get("R", np.zeros((m, m))), dtype=float),
        q=np.asarray(p.get("q", np.zeros(n)), dtype=float),
        rho=np.asarray(p.get("rho", np.zeros(m)), dtype=float),
    )


def riccati_to_csv(ric: RiccatiSolution, path):
    """Dump (t, vec(P), phi, c, vec(Theta), theta) rows."""
    n = ric.P.shape[1]
    m = ric.theta_gain.shape[1]
    header = (
        ["t"]
        + [f"P_{i}{j}" for i in range(n) for j in range(n)]
        + [f"phi_{i}" for i in range(n)]
        + ["c"]
        + [f"Theta_{i}{j}" for i in range(m) for j in range(n)]
        + [f"theta_{i}" for i in range(m)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j, t in enumerate(ric.times):
            row = [repr(float(t))]
            row += [repr(float(v)) for v in ric.P[j].ravel()]
            row += [repr(float(v)) for v in ric.phi[j]]
            row.append(repr(float(ric.c[j])))
            row += [repr(float(v)) for v in ric.theta_gain[j].ravel()]
            row += [repr(float(v)) for v in ric.theta_offset[j]]
            writer.writerow(row)
