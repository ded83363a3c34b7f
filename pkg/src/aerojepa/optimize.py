"""Constrained search over the pooled context latent for maximum probed lift-to-drag.

The solver is a damped-BFGS SQP method. Each step solves the elastic
(l1-penalised) QP subproblem through its box-constrained dual, then runs a
backtracking line search on the l1 merit function with a second-order
correction; a projected-gradient step is the fallback when the QP direction
is not a descent direction. Problems are solved in whitened coordinates
``u = L^{-1}(z - mu)`` where ``Sigma = L L^T`` is the trust-region covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import chi2

from . import numerics as nx
from .errors import DimensionError, InfeasibleError, NumericError
from .latent_lab import TokenLift
from .model import AeroJEPANet
from .probes import RELIABLE_CV_R2, ProbeModel, ProbeSuite
from .synthgen import DESIGN_NAMES, Conditions

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9


# -- trust region ------------------------------------------------------------------------------
@dataclass(frozen=True)
class TrustRegion:
    mu: np.ndarray
    cov: np.ndarray
    tau: float
    chol: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mu.size, mu.size):
            raise DimensionError(f"covariance {cov.shape} does not match mean of size {mu.size}")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError("trust-region covariance is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", L)
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @classmethod
    def from_latents(cls, Z, reg: float = 1e-6, quantile: float = 0.95, tau: Optional[float] = None):
        Z = np.asarray(Z, dtype=np.float64)
        d = Z.shape[1]
        cov = np.cov(Z, rowvar=False).reshape(d, d) + reg * np.eye(d)
        return cls(Z.mean(axis=0), cov, float(chi2.ppf(quantile, d)) if tau is None else float(tau))

    @property
    def dim(self) -> int:
        return self.mu.size

    def whiten(self, z) -> np.ndarray:
        return solve_triangular(self.chol, np.asarray(z, dtype=np.float64) - self.mu, lower=True)

    def unwhiten(self, u) -> np.ndarray:
        return self.mu + self.chol @ np.asarray(u, dtype=np.float64)


def mahalanobis(z, region: TrustRegion, return_grad: bool = False):
    """``(z - mu)^T Sigma^{-1} (z - mu)`` via the Cholesky factor; gradient ``2 Sigma^{-1}(z - mu)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != region.mu.shape:
        raise DimensionError(f"latent of shape {z.shape} vs trust region dim {region.dim}")
    u = region.whiten(z)
    val = float(u @ u)
    if not return_grad:
        return val
    grad = 2.0 * solve_triangular(region.chol.T, u, lower=False)
    return val, grad


def mahalanobis_distance(a, b, region: TrustRegion) -> float:
    diff = solve_triangular(region.chol, np.asarray(a) - np.asarray(b), lower=True)
    return float(np.sqrt(diff @ diff))


# -- generic SQP ---------------------------------------------------------------------------------
@dataclass
class SmoothProblem:
    """``min f(x)`` s.t. ``c_i(x) <= 0``. ``evaluate(x) -> (f, grad_f, c, J)``."""

    n: int
    evaluate: Callable
    constraint_names: tuple = ()
    ball_radius2: Optional[float] = None  # |x|^2 <= r2 is one of the constraints (for the fallback projection)


@dataclass
class SQPResult:
    x: np.ndarray
    f: float
    c: np.ndarray
    lam: np.ndarray
    converged: bool
    iterations: int
    kkt_residual: float
    max_violation: float
    trace: list
    merit_pairs: list
    fallback_steps: int
    message: str = ""


def _box_qp(Q: np.ndarray, c: np.ndarray, upper: float, lam0=None, max_iter: int = 500) -> np.ndarray:
    """``min 0.5 l^T Q l + c^T l`` on ``0 <= l <= upper`` by projected Newton with a gradient fallback."""
    m = c.size
    if m == 0:
        return np.zeros(0)
    lam = np.zeros(m) if lam0 is None else np.clip(lam0, 0.0, upper)
    ridge = 1e-14 * max(1.0, np.trace(Q))

    def q(v):
        return 0.5 * v @ Q @ v + c @ v

    scale = 1.0 + np.abs(c).max() + np.abs(Q).max() * upper
    for _ in range(max_iter):
        g = Q @ lam + c
        fixed = ((lam <= 0.0) & (g > 0.0)) | ((lam >= upper) & (g < 0.0))
        free = ~fixed
        pg = np.where(free, g, 0.0)
        if np.abs(pg).max() <= 1e-14 * scale:
            break
        step = np.zeros(m)
        Qf = Q[np.ix_(free, free)] + ridge * np.eye(int(free.sum()))
        step[free] = -np.linalg.lstsq(Qf, g[free], rcond=None)[0]
        q0 = q(lam)
        t, new = 1.0, None
        while t > 1e-12:
            cand = np.clip(lam + t * step, 0.0, upper)
            if q(cand) < q0 - 1e-16 * scale:
                new = cand
                break
            t *= 0.5
        if new is None:
            # projected gradient with an exact step along -pg
            curv = pg @ Q @ pg
            t = (pg @ pg) / curv if curv > 0 else 1.0
            new = np.clip(lam - t * pg, 0.0, upper)
            if q(new) >= q0:
                break
        if np.array_equal(new, lam):
            break
        lam = new
    return lam


def _bfgs_update(B: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Powell-damped BFGS update; keeps ``B`` positive definite."""
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-300:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        r = theta * y + (1.0 - theta) * Bs
    else:
        r = y
    sr = float(s @ r)
    if sr <= 1e-300:
        return B
    return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / sr


def _fd_hessian(problem: SmoothProblem, x, lam, J=None, floor: float = 1e-8) -> np.ndarray:
    """Central-difference Hessian of the Lagrangian, made positive definite for the QP.

    With active constraints (``lam > 0``) only the curvature on their null
    space is kept (absolute eigenvalues); the normal space gets the largest
    tangential curvature. This drops the large indefinite cross terms of
    ratio objectives that vanish along the constraint surface.
    """
    n = x.size
    H = np.empty((n, n))
    h = 1e-5 * (1.0 + np.abs(x).max())
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        _, gp, _, Jp = problem.evaluate(x + e)
        _, gm, _, Jm = problem.evaluate(x - e)
        H[:, i] = ((gp - gm) + ((Jp - Jm).T @ lam if lam.size else 0.0)) / (2 * h)
    H = 0.5 * (H + H.T)
    act = lam > 0.0 if lam.size else np.zeros(0, bool)
    if J is None or not act.any():
        vals, vecs = np.linalg.eigh(H)
        vals = np.maximum(np.abs(vals), floor * max(1.0, np.abs(vals).max()))
        return (vecs * vals) @ vecs.T
    Q, _ = np.linalg.qr(J[act].T, mode="complete")
    k = int(np.linalg.matrix_rank(J[act]))
    Y, Zn = Q[:, :k], Q[:, k:]
    if Zn.shape[1] == 0:
        return np.eye(n)
    vals, vecs = np.linalg.eigh(Zn.T @ H @ Zn)
    top = max(1.0, np.abs(vals).max())
    vals = np.maximum(np.abs(vals), floor * top)
    Zv = Zn @ vecs
    return (Zv * vals) @ Zv.T + top * (Y @ Y.T)


def sqp(problem: SmoothProblem, x0, max_iter: int = 300, xtol: float = 1e-11, ktol: float = 1e-9,
        ctol: float = FEAS_TOL, rho0: Optional[float] = None, hessian: str = "bfgs") -> SQPResult:
    """SQP with an l1 merit line search.

    ``hessian`` is ``"bfgs"`` (damped quasi-Newton) or ``"fd"`` (finite
    differences of the Lagrangian gradient, for strongly curved objectives).
    """
    if hessian not in ("bfgs", "fd"):
        raise ValueError("hessian must be 'bfgs' or 'fd'")
    x = np.asarray(x0, dtype=np.float64).copy()
    n = problem.n
    B = np.eye(n)
    f, gf, c, J = problem.evaluate(x)
    cap = 10.0 * (1.0 + np.abs(gf).max())  # bound on the elastic QP multipliers
    rho = 0.0 if rho0 is None else float(rho0)  # l1 merit weight, only ever raised
    lam = np.zeros(c.size)
    trace = [x.copy()]
    merit_pairs = []
    fallback = 0
    converged = False
    message = "iteration limit"

    def merit(fv, cv, r):
        return fv + r * np.maximum(cv, 0.0).sum()

    it = 0
    for it in range(1, max_iter + 1):
        if hessian == "fd":
            B = _fd_hessian(problem, x, lam, J)
        # elastic QP subproblem through its dual
        try:
            cf = cho_factor(B)
        except np.linalg.LinAlgError:
            B = np.eye(n)
            cf = cho_factor(B)
        Binv_g = cho_solve(cf, gf)
        Binv_Jt = cho_solve(cf, J.T) if c.size else np.zeros((n, 0))
        Q = J @ Binv_Jt
        qc = J @ Binv_g - c
        for _ in range(12):
            lam = _box_qp(Q, qc, cap, lam)
            if c.size == 0 or lam.max() < 0.999 * cap:
                break
            cap *= 10.0
        p = -(Binv_g + Binv_Jt @ lam)
        viol = float(np.maximum(c, 0.0).max()) if c.size else 0.0
        kkt = float(np.linalg.norm(gf + J.T @ lam)) if c.size else float(np.linalg.norm(gf))
        if viol <= ctol and (np.linalg.norm(p) <= xtol * (1.0 + np.linalg.norm(x)) or kkt <= ktol):
            converged = True
            message = "converged"
            break
        lin = np.maximum(c + J @ p, 0.0).sum() if c.size else 0.0
        if c.size:
            rho = max(rho, 1.5 * float(lam.max()) + 1e-8)
            drop = np.maximum(c, 0.0).sum() - lin
            if drop > 0.0:
                # keep the step a descent direction of the merit
                rho = max(rho, float(gf @ p + 0.5 * p @ B @ p) / (0.5 * drop))
        phi0 = merit(f, c, rho)
        D = float(gf @ p + rho * (lin - np.maximum(c, 0.0).sum()))
        accepted = None
        if D < 0.0:
            act = ((lam > 0.0) | (c + J @ p >= -1e-10)) if c.size else np.zeros(0, bool)
            t = 1.0
            while t >= 1e-10:
                xn = x + t * p
                fn, gfn, cn, Jn = problem.evaluate(xn)
                if merit(fn, cn, rho) <= phi0 + 1e-4 * t * D:
                    accepted = (xn, fn, gfn, cn, Jn)
                    break
                if act.any():
                    # second-order correction: pull the active constraints back onto their linearisation,
                    # repeated a few times with the same Jacobian for strongly curved constraints
                    Ja = J[act]
                    target = (c + t * (J @ p))[act]
                    xs, cs = xn, cn
                    for _ in range(3):
                        xs = xs - Ja.T @ np.linalg.lstsq(Ja @ Ja.T, cs[act] - target, rcond=None)[0]
                        fs, gfs, cs, Js = problem.evaluate(xs)
                        if merit(fs, cs, rho) <= phi0 + 1e-4 * t * D:
                            accepted = (xs, fs, gfs, cs, Js)
                            break
                    if accepted is not None:
                        break
                t *= 0.5
        if accepted is None:
            accepted = _fallback_step(problem, x, f, gf, c, J, rho, merit)
            fallback += 1
            B = np.eye(n)
            if accepted is None:
                message = "no descent step found"
                break
        xn, fn, gfn, cn, Jn = accepted
        merit_pairs.append((phi0, merit(fn, cn, rho)))
        s = xn - x
        y = (gfn + Jn.T @ lam) - (gf + J.T @ lam) if c.size else gfn - gf
        B = _bfgs_update(B, s, y)
        x, f, gf, c, J = xn, fn, gfn, cn, Jn
        trace.append(x.copy())
        if np.linalg.norm(s) <= 1e-15 * (1.0 + np.linalg.norm(x)):
            message = "step too small"
            converged = bool(viol <= ctol)
            break
    viol = float(np.maximum(c, 0.0).max()) if c.size else 0.0
    kkt = float(np.linalg.norm(gf + J.T @ lam)) if c.size else float(np.linalg.norm(gf))
    return SQPResult(x, float(f), c, lam, converged, it, kkt, viol, trace, merit_pairs, fallback, message)


def _fallback_step(problem, x, f, gf, c, J, rho, merit):
    """Projected (sub)gradient step on the merit function."""
    d = -(gf + rho * (J[c > 0].sum(axis=0) if c.size else 0.0))
    if not np.any(d):
        return None
    phi0 = merit(f, c, rho)
    t = 1.0 / max(1.0, np.linalg.norm(d))
    while t >= 1e-14:
        xn = x + t * d
        if problem.ball_radius2 is not None:
            r2 = float(xn @ xn)
            if r2 > problem.ball_radius2:
                xn = xn * np.sqrt(problem.ball_radius2 / r2)
        fn, gfn, cn, Jn = problem.evaluate(xn)
        if merit(fn, cn, rho) < phi0:
            return xn, fn, gfn, cn, Jn
        t *= 0.5
    return None


# -- the latent design problem ------------------------------------------------------------------
@dataclass
class Envelope:
    """Training-split statistics that set every constraint threshold."""

    cd_min: float
    cl_max: float
    cd_max: float
    ld_max: float
    ld_p95: float
    design_lo: np.ndarray
    design_hi: np.ndarray

    @classmethod
    def from_table(cls, table) -> "Envelope":
        tr = table.mask("train")
        cl, cd, design = table.cl[tr], table.cd[tr], table.design[tr]
        ld = cl / cd
        return cls(float(cd.min()), float(cl.max()), float(cd.max()), float(ld.max()),
                   float(np.percentile(ld, 95)), design.min(axis=0), design.max(axis=0))


@dataclass
class LatentOptProblem:
    """Frozen predictor plus coefficient probes at a cruise condition, with the guardrail set."""

    net: AeroJEPANet
    lift: TokenLift
    coeff_suite: ProbeSuite
    design_suite: ProbeSuite
    region: TrustRegion
    envelope: Envelope
    cruise: Conditions = Conditions(0.0, 0.0)
    drag_floor_factor: float = 0.9
    ceiling_factor: float = 1.05
    prox_weight: float = 0.05
    reliable_threshold: float = RELIABLE_CV_R2

    def __post_init__(self):
        self._cache = {}
        self.design_names = [k for k in self.design_suite.targets
                             if self.design_suite.models[k].cv_r2 >= self.reliable_threshold]

    # predictor + probes with gradients w.r.t. z
    def _zpred(self, z: np.ndarray):
        zt = nx.Tensor(z, requires_grad=True)
        M, d = self.lift.base.shape
        tokens = self.lift.tokens(zt)
        pred = self.net.predicted_tokens(tokens.reshape(1, M, d), self.lift.centroids[None],
                                         self.cruise.as_array()[None])
        zp = pred.mean(axis=1).reshape(d)
        return zt, zp

    def aero(self, z) -> tuple:
        """``(cl, cd, dcl/dz, dcd/dz)`` through the frozen predictor."""
        z = np.asarray(z, dtype=np.float64)
        key = z.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = []
        for name in ("cl", "cd"):
            m: ProbeModel = self.coeff_suite.models[name]
            zt, zp = self._zpred(z)
            y = (zp * (m.w / m.sigma)).sum() + (m.b - float(m.mu @ (m.w / m.sigma)))
            y.backward()
            out.append((float(y.data), zt.grad.copy()))
        res = (out[0][0], out[1][0], out[0][1], out[1][1])
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = res
        return res

    def z_pred(self, z) -> np.ndarray:
        with nx.no_grad():
            return self._zpred(np.asarray(z, dtype=np.float64))[1].data.copy()

    def design(self, z) -> dict:
        return {k: float(self.design_suite.models[k].predict(z)) for k in self.design_suite.targets}

    def constraints(self, z) -> tuple:
        """Values (``<= 0`` feasible), z-gradients and names of every guardrail."""
        z = np.asarray(z, dtype=np.float64)
        env = self.envelope
        cl, cd, gcl, gcd = self.aero(z)
        vals, grads, names = [], [], []
        m_val, m_grad = mahalanobis(z, self.region, return_grad=True)
        vals.append(m_val - self.region.tau)
        grads.append(m_grad)
        names.append("trust_region")
        for k in self.design_names:
            pm = self.design_suite.models[k]
            j = DESIGN_NAMES.index(k)
            x, g = float(pm.predict(z)), pm.gradient()
            vals += [env.design_lo[j] - x, x - env.design_hi[j]]
            grads += [-g, g]
            names += [f"{k}_lower", f"{k}_upper"]
        vals.append(self.drag_floor_factor * env.cd_min - cd)
        grads.append(-gcd)
        names.append("drag_floor")
        vals.append(cl - self.ceiling_factor * env.cl_max)
        grads.append(gcl)
        names.append("lift_ceiling")
        vals.append(cd - self.ceiling_factor * env.cd_max)
        grads.append(gcd)
        names.append("drag_ceiling")
        vals.append(cl - env.ld_max * cd)
        grads.append(gcl - env.ld_max * gcd)
        names.append("ld_ceiling")
        return np.asarray(vals), np.stack(grads), tuple(names)

    def objective(self, z) -> tuple:
        """``-(L/D)/ld_max`` plus a small Mahalanobis proximity term; value and z-gradient."""
        z = np.asarray(z, dtype=np.float64)
        cl, cd, gcl, gcd = self.aero(z)
        s = self.envelope.ld_max
        ld = cl / cd
        gld = (gcl * cd - cl * gcd) / cd**2
        m, gm = mahalanobis(z, self.region, return_grad=True)
        w = self.prox_weight / self.region.tau
        return -ld / s + w * m, -gld / s + w * gm

    def smooth_problem(self) -> SmoothProblem:
        L = self.region.chol
        names = self.constraints(self.region.mu)[2]

        def evaluate(u):
            z = self.region.unwhiten(u)
            f, gz = self.objective(z)
            c, Jz, _ = self.constraints(z)
            return f, L.T @ gz, c, Jz @ L

        return SmoothProblem(self.region.dim, evaluate, names, ball_radius2=self.region.tau)


@dataclass
class OptResult:
    z_star: np.ndarray
    cl: float
    cd: float
    lift_to_drag: float
    residuals: dict
    restarts: list  # SQPResult per restart (x in whitened coordinates)
    restart_z: np.ndarray
    feasible: np.ndarray
    best_index: int
    n_converged_near_best: int
    design: dict
    nearest_case: Optional[int] = None
    nearest_distance: Optional[float] = None
    kkt_residual: float = float("nan")

    @property
    def converged_to_one_neighbourhood(self) -> bool:
        return self.n_converged_near_best == len(self.restarts)


def restart_points(problem: LatentOptProblem, train_latents, restarts: int, seed) -> np.ndarray:
    """Distinct training latents, pulled inside the trust region when outside."""
    Z = np.asarray(train_latents, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(Z), size=restarts, replace=len(Z) < restarts)
    out = []
    for z in Z[idx]:
        u = problem.region.whiten(z)
        r2 = float(u @ u)
        limit = 0.9 * problem.region.tau
        if r2 > limit:
            u = u * np.sqrt(limit / r2)
        out.append(problem.region.unwhiten(u))
    return np.asarray(out)


def solve(problem: LatentOptProblem, train_latents, restarts: int = 8, seed=0, neighbourhood: float = 0.5,
          tol: float = 1e-6, max_iter: int = 300, hessian: str = "fd") -> OptResult:
    """Multi-restart SQP; returns the best feasible optimum.

    Raises :class:`InfeasibleError` with per-constraint residuals of the least
    infeasible restart when no restart satisfies every constraint within ``tol``.
    """
    sp = problem.smooth_problem()
    starts = restart_points(problem, train_latents, restarts, seed)
    results, zs, feas = [], [], []
    for z0 in starts:
        res = sqp(sp, problem.region.whiten(z0), max_iter=max_iter, hessian=hessian)
        results.append(res)
        zs.append(problem.region.unwhiten(res.x))
        feas.append(res.max_violation <= tol)
        log.info("restart %d: f=%.6f viol=%.2e kkt=%.2e iters=%d %s", len(results), res.f,
                 res.max_violation, res.kkt_residual, res.iterations, res.message)
    zs = np.asarray(zs)
    feas = np.asarray(feas)
    names = sp.constraint_names
    if not feas.any():
        worst = min(results, key=lambda r: r.max_violation)
        raise InfeasibleError("no restart reached a feasible point",
                              {k: float(v) for k, v in zip(names, worst.c)})
    fvals = np.array([r.f if ok else np.inf for r, ok in zip(results, feas)])
    best = int(np.argmin(fvals))
    z_star = zs[best]
    cl, cd, _, _ = problem.aero(z_star)
    near = sum(
        1 for z, ok in zip(zs, feas) if ok and mahalanobis_distance(z, z_star, problem.region) <= neighbourhood
    )
    return OptResult(
        z_star=z_star, cl=cl, cd=cd, lift_to_drag=cl / cd,
        residuals={k: float(v) for k, v in zip(names, results[best].c)},
        restarts=results, restart_z=zs, feasible=feas, best_index=best, n_converged_near_best=near,
        design=problem.design(z_star), kkt_residual=results[best].kkt_residual,
    )


def retrieve_nearest(x_star, designs, case_ids=None, scale=None) -> tuple:
    """Case whose standardised design vector is closest to ``x_star`` (ties: lowest id).

    ``scale`` is ``(mean, std)`` for the standardisation; by default taken
    from ``designs`` themselves. Returns ``(case_id, distance)``.
    """
    X = np.asarray(designs, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a non-empty (n, k) design table")
    ids = np.arange(len(X)) if case_ids is None else np.asarray(case_ids)
    if scale is None:
        mean, std = X.mean(axis=0), X.std(axis=0)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in scale)
    std = np.where(std > 0, std, 1.0)
    diff = (X - np.asarray(x_star, dtype=np.float64)) / std
    d = np.sqrt(np.sum(diff * diff, axis=1))
    best = d.min()
    cand = ids[d == best]
    cid = cand.min()
    return int(cid), float(best)
