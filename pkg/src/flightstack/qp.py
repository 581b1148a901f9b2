"""Dense box-constrained QP kernel and the condensed linear-MPC builder.

Problems have the form

    minimize    0.5 x'Px + q'x
    subject to  l <= Cx <= u

with P positive definite.  The solver runs an over-relaxed ADMM iteration
(cached factorization, warm start) and then polishes the result by solving
the equality-constrained KKT system on the detected active set, refining the
set until the KKT conditions hold.  A polished solution is exact up to
round-off.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

SOLVED = "solved"
MAX_ITER = "max_iter"


class MaxIterations(RuntimeError):
    pass


class InvalidProblem(ValueError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    polished: bool
    objective: float
    prim_res: float
    dual_res: float
    active: tuple = ((), ())


class QpSolver:
    """ADMM + active-set polish for a fixed (P, C) pair.

    Only ``q``, ``l`` and ``u`` change between solves, so the linear system
    of the ADMM x-update is factorized once per penalty value.
    """

    def __init__(self, P, C, sigma=1e-6, alpha=1.6, rho=0.1, max_iter=200,
                 eps_abs=1e-6, eps_rel=1e-6, polish=True, check_every=5, warmup=25):
        P = np.asarray(P, dtype=float)
        C = np.asarray(C, dtype=float).reshape(-1, P.shape[0])
        self.n = P.shape[0]
        self.m = C.shape[0]
        self.P = P
        self.C = C
        # cost scaling and row normalization
        self.c = 1.0 / max(np.abs(np.diag(P)).max(), 1e-12)
        norms = np.linalg.norm(C, axis=1) if self.m else np.zeros(0)
        self.D = np.ones(self.n)
        self.E = 1.0 / np.where(norms > 0.0, norms, 1.0)
        self.Ps = self.c * P
        self.Cs = C * self.E[:, None]
        self.sigma = sigma
        self.alpha = alpha
        self.rho0 = rho
        self.max_iter = max_iter
        self.eps_abs = eps_abs
        self.eps_rel = eps_rel
        self.polish = polish
        self.check_every = check_every
        self.warmup = warmup
        self._factors: dict[float, np.ndarray] = {}
        self._Pinv = None

    def _inverse(self, rho: float) -> np.ndarray:
        M = self._factors.get(rho)
        if M is None:
            K = self.Ps + self.sigma * np.eye(self.n) + rho * (self.Cs.T @ self.Cs)
            M = np.linalg.inv(K)
            self._factors[rho] = M
        return M

    def objective(self, x, q) -> float:
        return float(0.5 * x @ self.P @ x + q @ x)

    def solve(self, q, l, u, x0=None, y0=None, active=None) -> QpResult:
        """Solve for new ``q, l, u``.

        ``x0, y0`` warm-start the ADMM iterates; ``active`` is an optional
        ``(lower, upper)`` guess of the active set (e.g. from the previous
        tick) that is tried before any ADMM iteration.
        """
        q = np.asarray(q, dtype=float)
        l = np.asarray(l, dtype=float)
        u = np.asarray(u, dtype=float)
        if np.any(l > u):
            raise InvalidProblem("lower bound exceeds upper bound")
        exact = None
        if self.polish:
            lo, up = active if active is not None else ((), ())
            exact = self._refine(q, l, u, set(lo), set(up), max_rounds=3 if active is not None else 1)
            if exact is None and active is not None:
                exact = self._dual_active_set(q, l, u, set(lo), set(up))
        it = 0
        status = MAX_ITER
        if exact is None:
            x, y, z, it, status = self._admm(q, l, u, x0, y0)
            if self.polish:
                exact = self._polish(q, l, u, z, y, max_rounds=3)
                if exact is None:
                    lo, up = self._guess(l, u, z, y)
                    exact = self._dual_active_set(q, l, u, lo, up)
            x_out = self.D * x
            y_out = y * self.E / self.c
        polished = exact is not None
        if polished:
            x_out, y_out = exact
            status = SOLVED
        lower_set = tuple(np.nonzero(y_out < 0.0)[0].tolist()) if polished else ()
        upper_set = tuple(np.nonzero(y_out > 0.0)[0].tolist()) if polished else ()
        Cx = self.C @ x_out
        prim_res = float(np.maximum(np.maximum(l - Cx, Cx - u), 0.0).max(initial=0.0))
        dual_res = float(np.abs(self.P @ x_out + q + self.C.T @ y_out).max())
        return QpResult(x_out, y_out, status, it, polished, self.objective(x_out, q), prim_res, dual_res,
                        (lower_set, upper_set))

    def _admm(self, q, l, u, x0, y0):
        """Over-relaxed ADMM in the scaled space; returns scaled iterates.

        With polishing enabled the iteration only has to identify the active
        set, so it stops at the first polish checkpoint that succeeds.
        """
        c, E = self.c, self.E
        qs = c * self.D * q
        ls = l * E
        us = u * E
        Ps, Cs = self.Ps, self.Cs
        x = np.zeros(self.n) if x0 is None else np.asarray(x0, dtype=float) / self.D
        y = np.zeros(self.m) if y0 is None else np.asarray(y0, dtype=float) * c / E
        z = np.clip(Cs @ x, ls, us)
        rho = self.rho0
        M = self._inverse(rho)
        sigma, alpha = self.sigma, self.alpha
        it = 0
        for it in range(1, self.max_iter + 1):
            xt = M @ (sigma * x - qs + Cs.T @ (rho * z - y))
            zt = Cs @ xt
            x = alpha * xt + (1.0 - alpha) * x
            zr = alpha * zt + (1.0 - alpha) * z
            z_new = np.clip(zr + y / rho, ls, us)
            y = y + rho * (zr - z_new)
            z = z_new
            if it % self.check_every == 0 or it == self.max_iter:
                Cx = Cs @ x
                Px = Ps @ x
                Cty = Cs.T @ y
                prim = np.abs(Cx - z).max() if self.m else 0.0
                dual = np.abs(Px + qs + Cty).max()
                scale_p = max(np.abs(Cx).max(initial=0.0), np.abs(z).max(initial=0.0))
                scale_d = max(np.abs(Px).max(), np.abs(Cty).max(initial=0.0), np.abs(qs).max())
                if prim <= self.eps_abs + self.eps_rel * scale_p and dual <= self.eps_abs + self.eps_rel * scale_d:
                    return x, y, z, it, SOLVED
                if self.polish and it >= self.warmup:
                    return x, y, z, it, MAX_ITER
                # penalty adaptation on a coarse logarithmic grid keeps the factor cache small
                num = prim / max(scale_p, 1e-12)
                den = dual / max(scale_d, 1e-12)
                if den > 0.0 and num > 0.0:
                    ratio = math.sqrt(num / den)
                    if ratio > 5.0 or ratio < 0.2:
                        new_rho = min(1e6, max(1e-6, rho * ratio))
                        new_rho = 10.0 ** (round(2.0 * math.log10(new_rho)) / 2.0)
                        if new_rho != rho:
                            rho = new_rho
                            M = self._inverse(rho)
        return x, y, z, it, MAX_ITER

    def _guess(self, l, u, z, y):
        ls = l * self.E
        us = u * self.E
        lower = set(np.nonzero((z - ls < -y) & np.isfinite(l))[0].tolist())
        upper = set(np.nonzero((us - z < y) & np.isfinite(u))[0].tolist()) - lower
        return lower, upper

    def _dual_active_set(self, q, l, u, lower, upper, max_iter=None):
        """Goldfarb-Idnani dual active-set method, optionally warm-started.

        The warm set is first pruned to a dual-feasible subset (multipliers of
        the right sign); from there the most violated constraint is added one
        at a time, dropping blocking constraints on partial steps.  Exact for
        strictly convex problems; returns ``(x, y)`` or None.
        """
        if self._Pinv is None:
            self._Pinv = np.linalg.inv(self.P)
        Pinv = self._Pinv
        C = self.C
        norms = 1.0 / self.E
        act = [(i, 1.0) for i in sorted(lower) if i < self.m and math.isfinite(l[i])]
        act += [(i, -1.0) for i in sorted(upper) if i < self.m and math.isfinite(u[i]) and i not in lower]
        bound_scale = 1.0 + np.where(np.isfinite(l), np.abs(l), 0.0) + np.where(np.isfinite(u), np.abs(u), 0.0)

        def bvec(items):
            return np.array([l[i] if sd > 0 else u[i] for i, sd in items])

        # prune the warm set to a dual-feasible one
        while True:
            rows = [i for i, _ in act]
            sol = self._kkt_solve(q, rows, bvec(act))
            if sol is None:
                act = []
                x, lam = -Pinv @ q, np.zeros(0)
                break
            x, nu = sol
            lam = -np.array([sd for _, sd in act]) * nu if act else np.zeros(0)
            bad = np.nonzero(lam < 0.0)[0]
            if len(bad) == 0:
                break
            act = [a for k, a in enumerate(act) if k not in set(bad.tolist())]
        lam = list(lam)
        max_iter = max_iter or 5 * (self.n + self.m)
        tol = 1e-10
        for _ in range(max_iter):
            Cx = C @ x
            with np.errstate(invalid="ignore"):
                v_lo = np.where(np.isfinite(l), (l - Cx) / bound_scale, -np.inf)
                v_up = np.where(np.isfinite(u), (Cx - u) / bound_scale, -np.inf)
            for i, sd in act:
                v_lo[i] = v_up[i] = -np.inf
            i_lo = int(np.argmax(v_lo)) if self.m else 0
            i_up = int(np.argmax(v_up)) if self.m else 0
            if self.m == 0 or max(v_lo[i_lo], v_up[i_up]) <= tol:
                rows = [i for i, _ in act]
                sol = self._kkt_solve(q, rows, bvec(act))
                if sol is None:
                    return None
                x_f, nu = sol
                y = np.zeros(self.m)
                y[rows] = nu
                return x_f, y
            p, sp = (i_lo, 1.0) if v_lo[i_lo] >= v_up[i_up] else (i_up, -1.0)
            n_p = sp * C[p]
            b_p = l[p] if sp > 0 else -u[p]
            lam_p = 0.0
            for _inner in range(self.n + self.m + 1):
                if act:
                    N = np.array([sd * C[i] for i, sd in act]).T
                    PN = Pinv @ N
                    S = N.T @ PN
                    try:
                        r = np.linalg.solve(S, PN.T @ n_p)
                    except np.linalg.LinAlgError:
                        return None
                    z = Pinv @ n_p - PN @ r
                else:
                    r = np.zeros(0)
                    z = Pinv @ n_p
                zn = float(z @ n_p)
                slack = float(n_p @ x) - b_p
                t2 = -slack / zn if zn > 1e-14 * norms[p] ** 2 else math.inf
                t1, drop = math.inf, -1
                for k, rk in enumerate(r):
                    if rk > 1e-14 and lam[k] / rk < t1:
                        t1, drop = lam[k] / rk, k
                if t1 == math.inf and t2 == math.inf:
                    return None
                t = min(t1, t2)
                if t2 < math.inf:
                    x = x + t * z
                for k in range(len(lam)):
                    lam[k] -= t * r[k]
                lam_p += t
                if t2 <= t1:
                    act.append((p, sp))
                    lam.append(lam_p)
                    break
                del act[drop]
                del lam[drop]
            else:
                return None
        return None

    def _kkt_solve(self, q, rows, b):
        # Schur complement on the active rows; P is small and well conditioned
        if self._Pinv is None:
            self._Pinv = np.linalg.inv(self.P)
        Pinv = self._Pinv
        x_free = -Pinv @ q
        if len(rows) == 0:
            return x_free, np.zeros(0)
        A = self.C[rows]
        PA = Pinv @ A.T
        S = A @ PA
        r = A @ x_free - b
        try:
            nu = np.linalg.solve(S, r)
        except np.linalg.LinAlgError:
            return None
        x = x_free - PA @ nu
        # one refinement step against the active equalities
        d = A @ x - b
        if np.abs(d).max() > 1e-13 * (1.0 + np.abs(b).max()):
            dnu = np.linalg.solve(S, d)
            nu = nu + dnu
            x = x - PA @ dnu
        if not np.isfinite(x).all():
            return None
        return x, nu

    def _polish(self, q, l, u, z, y, max_rounds=30):
        """Active-set refinement started from the ADMM guess (scaled z, y)."""
        ls = l * self.E
        us = u * self.E
        # lower-active: y < 0 and z at l; upper-active: y > 0 and z at u
        lower = set(np.nonzero((z - ls < -y) & np.isfinite(l))[0].tolist())
        upper = set(np.nonzero((us - z < y) & np.isfinite(u))[0].tolist()) - lower
        return self._refine(q, l, u, lower, upper, max_rounds)

    def _refine(self, q, l, u, lower, upper, max_rounds=30):
        """Primal-dual active-set iteration; returns ``(x, y)`` satisfying KKT or None.

        All violated constraints and wrong-signed multipliers are swapped at
        once until a working set repeats; from then on only the worst
        offender changes per round.
        """
        lower = {i for i in lower if i < self.m and math.isfinite(l[i])}
        upper = {i for i in upper if i < self.m and math.isfinite(u[i])} - lower
        tol = 1e-10
        seen = set()
        single = False
        bound_scale = 1.0 + np.where(np.isfinite(l), np.abs(l), 0.0) + np.where(np.isfinite(u), np.abs(u), 0.0)
        q_scale = 1.0 + np.abs(q).max()
        for _ in range(max_rounds):
            key = (frozenset(lower), frozenset(upper))
            if key in seen:
                if single:
                    return None
                single = True
            seen.add(key)
            rows = sorted(lower | upper)
            b = np.array([l[i] if i in lower else u[i] for i in rows])
            sol = self._kkt_solve(q, rows, b)
            if sol is None:
                return None
            x, nu = sol
            Cx = self.C @ x
            with np.errstate(invalid="ignore"):
                viol = np.maximum(l - Cx, Cx - u) / bound_scale
            viol[rows] = 0.0
            sgn = np.array([1.0 if i in lower else -1.0 for i in rows])
            wrong = sgn * nu / q_scale  # positive means wrong sign
            worst_v = int(np.argmax(viol)) if self.m else -1
            worst_d = int(np.argmax(wrong)) if len(rows) else -1
            has_v = self.m > 0 and viol[worst_v] > tol
            has_d = len(rows) > 0 and wrong[worst_d] > tol
            if not has_v and not has_d:
                y = np.zeros(self.m)
                y[rows] = nu
                stat = np.abs(self.P @ x + q + self.C.T @ y).max()
                if stat > 1e-8 * q_scale:
                    return None
                return x, y
            if single:
                if has_d and (not has_v or wrong[worst_d] >= viol[worst_v]):
                    i = rows[worst_d]
                    lower.discard(i)
                    upper.discard(i)
                else:
                    (lower if Cx[worst_v] < l[worst_v] else upper).add(worst_v)
                continue
            for k in np.nonzero(wrong > tol)[0].tolist():
                lower.discard(rows[k])
                upper.discard(rows[k])
            for i in np.nonzero(viol > tol)[0].tolist():
                (lower if Cx[i] < l[i] else upper).add(i)
        return None


def dual_objective(P, q, C, l, u, y) -> float:
    """Lagrange dual function value at ``y``: a lower bound on the optimum."""
    w = q + C.T @ y
    val = -0.5 * w @ np.linalg.solve(P, w)
    yp = np.maximum(y, 0.0)
    yn = np.minimum(y, 0.0)
    with np.errstate(invalid="ignore"):
        up = np.where(yp > 0.0, u * yp, 0.0)
        lo = np.where(yn < 0.0, l * yn, 0.0)
    return float(val - up.sum() - lo.sum())


# ---------------------------------------------------------------------------
# condensed linear MPC
# ---------------------------------------------------------------------------


@dataclass
class MpcProblem:
    """Single-input linear MPC over horizon ``n``.

    Cost: 0.5 * sum_{i<n} e_i' Q e_i + e_n' S e_n with e_i = x_i - ref_i.
    Constraints: x_min <= x_i <= x_max, u_min <= u_i <= u_max and
    |u_i - u_{i-1}| <= du_max for i >= 2 (also for i = 1 against ``u_prev``
    when given).  ``soft`` lists state components whose bounds get a shared
    slack variable with an exact (linear) plus a small quadratic penalty.
    ``K`` is an optional pre-stabilizing state feedback: the decision
    variables become v with u_i = v_i - K x_{i-1}, which leaves the optimum
    unchanged but keeps the condensed Hessian well conditioned for long
    horizons over marginally stable models.
    """

    A: np.ndarray
    B: np.ndarray
    n: int
    Q: np.ndarray
    S: np.ndarray
    x0: np.ndarray
    ref: np.ndarray
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    u_min: float = -math.inf
    u_max: float = math.inf
    du_max: float = math.inf
    u_prev: float | None = None
    soft: tuple = ()
    soft_weight: float = 1e4
    K: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        k = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(k)
        self.Q = np.asarray(self.Q, dtype=float).reshape(k)
        self.S = np.asarray(self.S, dtype=float).reshape(k)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(k)
        ref = np.asarray(self.ref, dtype=float)
        self.ref = np.broadcast_to(ref, (self.n, k)).copy() if ref.ndim == 1 else ref.reshape(self.n, k)
        self.x_min = np.full(k, -math.inf) if self.x_min is None else np.asarray(self.x_min, dtype=float).reshape(k)
        self.x_max = np.full(k, math.inf) if self.x_max is None else np.asarray(self.x_max, dtype=float).reshape(k)
        if self.n < 2:
            raise InvalidProblem("horizon must be at least 2")
        if (self.Q < 0.0).any() or (self.S < 0.0).any():
            raise InvalidProblem("penalties must be non-negative")
        if (self.x_min > self.x_max).any() or self.u_min > self.u_max or self.du_max < 0.0:
            raise InvalidProblem("contradictory bounds")
        if not np.isfinite(self.x0).all():
            raise InvalidProblem("initial state must be finite")
        if self.K is not None:
            self.K = np.asarray(self.K, dtype=float).reshape(k)

    @property
    def nx(self) -> int:
        return self.A.shape[0]


@dataclass
class MpcSolution:
    u: np.ndarray
    states: np.ndarray
    cost: float
    status: str
    iterations: int
    polished: bool
    slack: float = 0.0
    qp: QpResult | None = field(default=None, repr=False)


class _Condensed:
    """Problem-structure-dependent matrices, shared by every solve of that structure."""

    def __init__(self, p: MpcProblem):
        k, n = p.nx, p.n
        B = p.B
        K = np.zeros(k) if p.K is None else p.K
        A = p.A - np.outer(B, K)
        Phi = np.zeros((n, k, k))
        Gam = np.zeros((n, k, n))
        Ai = np.eye(k)
        powers = [np.eye(k)]
        for i in range(n):
            Ai = A @ Ai
            Phi[i] = Ai
            powers.append(Ai)
        for i in range(n):
            for j in range(i + 1):
                Gam[i, :, j] = powers[i - j] @ B
        # actual inputs u = U v + Ux0 x0
        U = np.eye(n)
        Ux0 = np.zeros((n, k))
        Ux0[0] = -K
        for i in range(1, n):
            U[i] -= K @ Gam[i - 1]
            Ux0[i] = -K @ Phi[i - 1]
        self.U = U
        self.Ux0 = Ux0
        W = np.tile(p.Q, (n, 1))
        W[-1] = 2.0 * p.S
        self.Phi = Phi
        self.Gam = Gam
        self.W = W
        Wf = W.reshape(-1)
        G = Gam.transpose(0, 1, 2).reshape(n * k, n)
        P = G.T @ (Wf[:, None] * G)
        self.G = G
        self.Wf = Wf
        self.n, self.k = n, k
        self.soft = tuple(p.soft)
        nv = n + (1 if self.soft else 0)
        self.nv = nv

        rows = []
        self.state_rows = []  # (component, soft)
        for j in range(k):
            if math.isfinite(p.x_min[j]) or math.isfinite(p.x_max[j]):
                self.state_rows.append(j)
        self.has_u_bounds = math.isfinite(p.u_min) or math.isfinite(p.u_max)
        self.has_slew = math.isfinite(p.du_max)
        self.slew_first = self.has_slew and p.u_prev is not None
        for j in self.state_rows:
            blk = np.zeros((n, nv))
            blk[:, :n] = Gam[:, j, :]
            rows.append(blk)
            if j in self.soft:
                # x - s <= max and x + s >= min are written as two row sets
                up = blk.copy()
                up[:, n] = -1.0
                lo = blk.copy()
                lo[:, n] = 1.0
                rows[-1] = up
                rows.append(lo)
        if self.has_u_bounds:
            blk = np.zeros((n, nv))
            blk[:, :n] = U
            rows.append(blk)
        if self.has_slew:
            start = 0 if self.slew_first else 1
            blk = np.zeros((n - start, nv))
            for r, i in enumerate(range(start, n)):
                blk[r, :n] = U[i] - (U[i - 1] if i > 0 else 0.0)
            rows.append(blk)
        if self.soft:
            blk = np.zeros((1, nv))
            blk[0, n] = 1.0
            rows.append(blk)
        C = np.vstack(rows) if rows else np.zeros((0, nv))
        # rows that do not depend on the inputs (first-step velocity with a
        # relative-degree-two input) are fixed by x0 and cannot be enforced
        self.keep = np.abs(C).max(axis=1) > 1e-14 if len(C) else np.zeros(0, dtype=bool)
        C = C[self.keep]
        Pfull = np.zeros((nv, nv))
        Pfull[:n, :n] = P
        if self.soft:
            Pfull[n, n] = 1e-3 * p.soft_weight
        self.P = Pfull
        self.C = C
        self.solver = QpSolver(Pfull, C)

    def bounds(self, p: MpcProblem, free):
        """Constraint bounds given the free response ``free`` (n x k)."""
        n = self.n
        l, u = [], []
        for j in self.state_rows:
            lo = p.x_min[j] - free[:, j]
            hi = p.x_max[j] - free[:, j]
            if j in self.soft:
                l.append(np.full(n, -math.inf))
                u.append(hi)
                l.append(lo)
                u.append(np.full(n, math.inf))
            else:
                l.append(lo)
                u.append(hi)
        u_free = self.Ux0 @ p.x0
        if self.has_u_bounds:
            l.append(p.u_min - u_free)
            u.append(p.u_max - u_free)
        if self.has_slew:
            d_free = np.diff(u_free)
            lo = -p.du_max - d_free if not self.slew_first else np.concatenate(([-p.du_max], -p.du_max - d_free))
            hi = p.du_max - d_free if not self.slew_first else np.concatenate(([p.du_max], p.du_max - d_free))
            if self.slew_first:
                lo[0] += p.u_prev - u_free[0]
                hi[0] += p.u_prev - u_free[0]
            l.append(lo)
            u.append(hi)
        if self.soft:
            l.append(np.zeros(1))
            u.append(np.full(1, math.inf))
        if not l:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(l)[self.keep], np.concatenate(u)[self.keep]


_CACHE: "OrderedDict[tuple, _Condensed]" = OrderedDict()
_CACHE_SIZE = 32


def _structure_key(p: MpcProblem) -> tuple:
    return (
        p.A.tobytes(), p.B.tobytes(), p.n, p.Q.tobytes(), p.S.tobytes(),
        tuple(bool(math.isfinite(a) or math.isfinite(b)) for a, b in zip(p.x_min, p.x_max)),
        math.isfinite(p.u_min) or math.isfinite(p.u_max), math.isfinite(p.du_max),
        p.u_prev is not None, tuple(p.soft), p.soft_weight,
        None if p.K is None else p.K.tobytes(),
    )


def condensed(p: MpcProblem) -> _Condensed:
    key = _structure_key(p)
    cond = _CACHE.get(key)
    if cond is None:
        cond = _Condensed(p)
        _CACHE[key] = cond
        if len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    else:
        _CACHE.move_to_end(key)
    return cond


def qp_data(p: MpcProblem):
    """Dense ``(P, q, C, l, u, const)`` of the condensed problem."""
    cond = condensed(p)
    free = np.einsum("ijk,k->ij", cond.Phi, p.x0)
    e0 = (free - p.ref).reshape(-1)
    q = np.zeros(cond.nv)
    q[:cond.n] = cond.G.T @ (cond.Wf * e0)
    if cond.soft:
        q[cond.n] = p.soft_weight
    const = 0.5 * float(e0 @ (cond.Wf * e0))
    l, u = cond.bounds(p, free)
    return cond.P, q, cond.C, l, u, const, cond, free


def qp_solve(p: MpcProblem, warm: "MpcSolution | None" = None, shift: bool = False) -> MpcSolution:
    """Solve the MPC problem; dynamics hold exactly by condensed substitution.

    ``warm`` is a previous solution of a problem with the same structure; its
    input sequence (shifted one step when ``shift``) and active set seed the
    solver.
    """
    P, q, C, l, u, const, cond, free = qp_data(p)
    x0 = y0 = active = None
    if warm is not None and warm.qp is not None and len(warm.qp.x) == cond.nv:
        x0 = warm.qp.x.copy()
        if shift:
            x0[:cond.n] = np.concatenate((x0[1:cond.n], x0[cond.n - 1:cond.n]))
        if len(warm.qp.y) == C.shape[0]:
            y0 = warm.qp.y
            active = warm.qp.active
    res = cond.solver.solve(q, l, u, x0=x0, y0=y0, active=active)
    v = res.x[:cond.n]
    uu = cond.U @ v + cond.Ux0 @ p.x0
    states = free + np.einsum("ijk,k->ij", cond.Gam, v)
    slack = float(res.x[cond.n]) if cond.soft else 0.0
    cost = res.objective + const
    if cond.soft:
        cost -= p.soft_weight * slack + 0.5 * cond.P[cond.n, cond.n] * slack * slack
    return MpcSolution(uu, states, cost, res.status, res.iterations, res.polished, slack, res)


def mpc_cost(p: MpcProblem, u) -> float:
    """Evaluate the MPC cost of an input sequence by forward simulation."""
    x = p.x0.copy()
    cost = 0.0
    for i in range(p.n):
        x = p.A @ x + p.B * u[i]
        e = x - p.ref[i]
        w = p.Q if i < p.n - 1 else 2.0 * p.S
        cost += 0.5 * float(e @ (w * e))
    return cost


def rollout(p: MpcProblem, u) -> np.ndarray:
    x = p.x0.copy()
    out = np.zeros((p.n, p.nx))
    for i in range(p.n):
        x = p.A @ x + p.B * u[i]
        out[i] = x
    return out
