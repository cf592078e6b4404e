"""Convex QP solver via ADMM operator splitting.

Problems take the form

    min  1/2 x' B x + q' x   s.t.  lo <= A x <= hi,

with equality rows encoded as lo == hi.  One factorization of the
quasi-definite KKT matrix is reused across all iterations; a polish step
after convergence re-solves the equality-constrained QP on the detected
active set and is kept only when it improves the KKT residuals.

Settings (fixed-penalty ADMM):
    rho_eq   [1e3]    penalty on equality rows
    rho_ineq [0.1]    penalty on inequality rows
    sigma    [1e-6]   primal regularization
    alpha    [1.6]    over-relaxation
    eps_abs / eps_rel [1e-8]   termination tolerances
    max_iter [20000]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class Status(Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class QpData:
    """Quadratic model of one subproblem."""

    B: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.B = sp.csc_matrix(self.B)
        self.A = sp.csc_matrix(self.A)
        self.q = np.asarray(self.q, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        n = self.q.size
        m = self.lo.size
        if self.B.shape != (n, n) or self.A.shape != (m, n):
            raise ValueError("inconsistent QP dimensions")
        if np.any(self.lo > self.hi):
            raise ValueError("lo must not exceed hi")
        sym_err = abs(self.B - self.B.T)
        if sym_err.nnz and sym_err.max() > 1e-9:
            raise ValueError("B must be symmetric")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.lo.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.B @ x) + self.q @ x)


@dataclass
class WarmStart:
    primal: np.ndarray
    dual: np.ndarray


@dataclass
class QpSolution:
    """Primal/dual pair with row multipliers.

    Dual sign convention: >= 0 on rows active at the upper bound, <= 0 on
    rows active at the lower bound, free on equality rows.
    """

    primal: np.ndarray
    dual: np.ndarray
    status: Status
    iterations: int
    polished: bool = False
    residuals: tuple[float, float, float] = field(default=(np.inf,) * 3)


def kkt_residual(data: QpData, sol: QpSolution) -> tuple[float, float, float]:
    """Max-norm primal, dual, and complementarity residuals."""
    return _kkt_residual(data, sol.primal, sol.dual)


def _kkt_residual(data, x, y):
    ax = data.A @ x
    if data.m:
        r_prim = float(np.max(np.abs(ax - np.clip(ax, data.lo, data.hi))))
    else:
        r_prim = 0.0
    r_dual = float(np.max(np.abs(data.B @ x + data.q + data.A.T @ y)))
    r_comp = 0.0
    for i in range(data.m):
        if data.lo[i] == data.hi[i]:
            continue
        up = max(y[i], 0.0)
        dn = max(-y[i], 0.0)
        c = 0.0
        if np.isfinite(data.hi[i]):
            c += up * max(data.hi[i] - ax[i], 0.0)
        else:
            c += up
        if np.isfinite(data.lo[i]):
            c += dn * max(ax[i] - data.lo[i], 0.0)
        else:
            c += dn
        r_comp = max(r_comp, c)
    return r_prim, r_dual, float(r_comp)


def _ruiz_equilibrate(B: sp.csc_matrix, q: np.ndarray, A: sp.csc_matrix,
                      iters: int = 10) -> tuple:
    """Symmetric diagonal scaling of the stacked KKT data plus cost scaling.

    Returns (B_s, q_s, A_s, d, e, c) with B_s = c D B D, q_s = c D q,
    A_s = E A D for D = diag(d), E = diag(e).
    """
    n, m = q.size, A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    B_s, q_s, A_s = B.copy(), q.copy(), A.copy()
    for _ in range(iters):
        col_b = np.zeros(n)
        if B_s.nnz:
            col_b = abs(B_s).max(axis=0).toarray().ravel()
        col_a = abs(A_s).max(axis=0).toarray().ravel() if A_s.nnz else np.zeros(n)
        row_a = abs(A_s).max(axis=1).toarray().ravel() if A_s.nnz else np.zeros(m)
        norm_n = np.maximum(col_b, col_a)
        delta_n = np.where(norm_n > 1e-8, 1.0 / np.sqrt(norm_n), 1.0)
        delta_m = np.where(row_a > 1e-8, 1.0 / np.sqrt(row_a), 1.0)
        dn = sp.diags(delta_n)
        dm = sp.diags(delta_m)
        B_s = dn @ B_s @ dn
        A_s = dm @ A_s @ dn
        q_s = delta_n * q_s
        d *= delta_n
        e *= delta_m
        # normalize the cost so curvature and gradient stay order one
        col_b = abs(B_s).max(axis=0).toarray().ravel() if B_s.nnz else np.zeros(n)
        denom = max(float(np.mean(col_b)), float(np.max(np.abs(q_s))) if n else 0.0)
        if denom > 1e-8:
            gamma = 1.0 / denom
            B_s = B_s * gamma
            q_s = q_s * gamma
            c *= gamma
    return B_s.tocsc(), q_s, A_s.tocsc(), d, e, c


class AdmmSolver:
    """Operator-splitting QP solver instance.

    The data is Ruiz-equilibrated before iterating so the fixed penalties
    act on a well-scaled problem; results and termination tests are in the
    original units.  An instance owns its workspace, so run one solve at a
    time per instance; independent instances may run in parallel.
    """

    def __init__(self, eps_abs: float = 1e-8, eps_rel: float = 1e-8,
                 max_iter: int = 20000, rho_eq: float = 1e3,
                 rho_ineq: float = 0.1, sigma: float = 1e-6,
                 alpha: float = 1.6, polish: bool = True,
                 scaling_iters: int = 10, infeas_check_every: int = 25,
                 rho_update_every: int = 50):
        self.eps_abs = eps_abs
        self.eps_rel = eps_rel
        self.max_iter = max_iter
        self.rho_eq = rho_eq
        self.rho_ineq = rho_ineq
        self.sigma = sigma
        self.alpha = alpha
        self.polish = polish
        self.scaling_iters = scaling_iters
        self.infeas_check_every = infeas_check_every
        # fixed-penalty ADMM stalls on the degenerate active sets the
        # level-set rows produce, so the penalty adapts from the defaults
        # at a fixed, deterministic interval (0 disables)
        self.rho_update_every = rho_update_every
        self.polish_check_every = 100

    def solve(self, data: QpData, warm: WarmStart | None = None) -> QpSolution:
        n, m = data.n, data.m
        if m == 0:
            return self._solve_unconstrained(data)

        Bs, qs, As, d, e, c = _ruiz_equilibrate(
            data.B, data.q, data.A, self.scaling_iters)
        lo = e * data.lo
        hi = e * data.hi

        eq = data.lo == data.hi
        rho = np.where(eq, self.rho_eq, self.rho_ineq)
        rho_inv = 1.0 / rho
        reg = Bs + self.sigma * sp.eye(n)

        def factor():
            kkt = sp.bmat([[reg, As.T], [As, -sp.diags(rho_inv)]],
                          format="csc")
            return spla.splu(kkt)

        lu = factor()

        if warm is not None:
            x = np.asarray(warm.primal, dtype=float) / d
            y = c * np.asarray(warm.dual, dtype=float) / e
        else:
            x = np.zeros(n)
            y = np.zeros(m)
        z = np.clip(As @ x, lo, hi)

        d_inv = 1.0 / d
        e_inv = 1.0 / e
        c_inv = 1.0 / c
        qd = c_inv * d_inv * qs
        q_norm = np.max(np.abs(qd)) if n else 0.0
        status = Status.MAX_ITER
        iterations = self.max_iter
        for it in range(1, self.max_iter + 1):
            x_prev = x
            y_prev = y

            rhs = np.concatenate((self.sigma * x - qs, z - rho_inv * y))
            sol = lu.solve(rhs)
            x_tilde = sol[:n]
            z_tilde = z + rho_inv * (sol[n:] - y)

            x = self.alpha * x_tilde + (1.0 - self.alpha) * x_prev
            z_hat = self.alpha * z_tilde + (1.0 - self.alpha) * z
            z = np.clip(z_hat + rho_inv * y, lo, hi)
            y = y_prev + rho * (z_hat - z)

            # termination on the unscaled residuals
            ax = e_inv * (As @ x)
            bx = c_inv * d_inv * (Bs @ x)
            aty = c_inv * d_inv * (As.T @ y)
            az = e_inv * z
            r_prim = float(np.max(np.abs(ax - az)))
            r_dual = float(np.max(np.abs(bx + qd + aty)))
            prim_scale = max(np.max(np.abs(ax)), np.max(np.abs(az)))
            dual_scale = max(np.max(np.abs(bx)), np.max(np.abs(aty)), q_norm)
            if (r_prim <= self.eps_abs + self.eps_rel * prim_scale
                    and r_dual <= self.eps_abs + self.eps_rel * dual_scale):
                status = Status.SOLVED
                iterations = it
                break

            # ADMM identifies the active set long before its iterates meet
            # a tight tolerance; periodically try the active-set polish and
            # accept it only when the verified KKT residuals already
            # satisfy the termination test.
            if self.polish and it % self.polish_check_every == 0:
                early = self._polish_accept(data, d * x, e * y * c_inv, it)
                if early is not None:
                    return early

            if self.rho_update_every and it % self.rho_update_every == 0:
                rel_p = r_prim / max(prim_scale, 1e-12)
                rel_d = r_dual / max(dual_scale, 1e-12)
                factor_rho = np.sqrt(rel_p / max(rel_d, 1e-16))
                if factor_rho > 5.0 or factor_rho < 0.2:
                    rho = np.clip(rho * factor_rho, 1e-6, 1e6)
                    rho_inv = 1.0 / rho
                    lu = factor()

            if it % self.infeas_check_every == 0:
                dy = e * (y - y_prev) * c_inv
                dx = d * (x - x_prev)
                if self._primal_infeasible(data, dy):
                    return QpSolution(d * x, e * y * c_inv,
                                      Status.PRIMAL_INFEASIBLE, it)
                if self._dual_infeasible(data, dx):
                    return QpSolution(d * x, e * y * c_inv,
                                      Status.DUAL_INFEASIBLE, it)

        x_out = d * x
        y_out = e * y * c_inv
        res = _kkt_residual(data, x_out, y_out)
        out = QpSolution(x_out, y_out, status, iterations, residuals=res)
        if self.polish:
            if status is Status.SOLVED:
                out = self._polish(data, out)
            else:
                early = self._polish_accept(data, x_out, y_out, iterations)
                if early is not None:
                    return early
        return out

    def _solve_unconstrained(self, data: QpData) -> QpSolution:
        reg = sp.csc_matrix(data.B + self.sigma * sp.eye(data.n))
        lu = spla.splu(reg)
        x = lu.solve(-data.q)
        for _ in range(3):
            x += lu.solve(-(data.B @ x + data.q))
        res = _kkt_residual(data, x, np.zeros(0))
        return QpSolution(x, np.zeros(0), Status.SOLVED, 1, residuals=res)

    def _primal_infeasible(self, data: QpData, dy: np.ndarray) -> bool:
        eps = 1e-10
        scale = np.max(np.abs(dy)) if dy.size else 0.0
        if scale <= eps:
            return False
        v = dy / scale
        up = np.maximum(v, 0.0)
        dn = np.minimum(v, 0.0)
        if np.any(up[~np.isfinite(data.hi)] > eps):
            return False
        if np.any(dn[~np.isfinite(data.lo)] < -eps):
            return False
        fin_hi = np.where(np.isfinite(data.hi), data.hi, 0.0)
        fin_lo = np.where(np.isfinite(data.lo), data.lo, 0.0)
        support = float(fin_hi @ up + fin_lo @ dn)
        if support >= -eps:
            return False
        return float(np.max(np.abs(data.A.T @ v))) <= eps

    def _dual_infeasible(self, data: QpData, dx: np.ndarray) -> bool:
        eps = 1e-10
        scale = np.max(np.abs(dx)) if dx.size else 0.0
        if scale <= eps:
            return False
        v = dx / scale
        if data.q @ v >= -eps:
            return False
        if float(np.max(np.abs(data.B @ v))) > eps:
            return False
        av = data.A @ v
        ok_up = (av <= eps) | ~np.isfinite(data.hi)
        ok_dn = (av >= -eps) | ~np.isfinite(data.lo)
        return bool(np.all(ok_up & ok_dn))

    def _solve_working_set(self, data: QpData, act_up: np.ndarray,
                           act_dn: np.ndarray
                           ) -> tuple[np.ndarray, np.ndarray] | None:
        """Equality-constrained solve on one working set, with refinement.

        Iterative refinement against the unregularized KKT removes the
        regularization bias; when the working set holds nearly parallel
        rows (a vanishing constraint gradient next to a bound row) the
        refinement contraction degrades, so the regularization steps down
        a deterministic ladder until the residual is tight.
        """
        eq = data.lo == data.hi
        active = np.flatnonzero(eq | act_up | act_dn)
        bounds = np.where(act_dn, data.lo, data.hi)[active]
        n = data.n
        k = active.size
        a_red = data.A[active]
        rhs = np.concatenate((-data.q, bounds))
        scale = max(1.0, float(np.max(np.abs(rhs))))

        def residual(z):
            return rhs - np.concatenate((
                data.B @ z[:n] + (a_red.T @ z[n:] if k else 0.0),
                a_red @ z[:n] if k else np.zeros(0)))

        best = None
        best_norm = np.inf
        for delta in (1e-7, 1e-10, 1e-13):
            if k:
                kkt = sp.bmat(
                    [[data.B + delta * sp.eye(n), a_red.T],
                     [a_red, -delta * sp.eye(k)]], format="csc")
            else:
                kkt = sp.csc_matrix(data.B + delta * sp.eye(n))
            try:
                lu = spla.splu(kkt)
            except RuntimeError:
                continue
            z = lu.solve(rhs)
            if not np.all(np.isfinite(z)):
                continue
            prev = np.inf
            for _ in range(15):
                r_norm = float(np.max(np.abs(residual(z))))
                if not np.isfinite(r_norm) or r_norm >= prev:
                    break
                prev = r_norm
                if r_norm < best_norm:
                    best_norm = r_norm
                    best = z.copy()
                if r_norm <= 1e-14 * scale:
                    break
                z = z + lu.solve(residual(z))
            if best_norm <= 1e-14 * scale:
                break
        # a loose reduced solve means the working set is rank deficient;
        # signal failure instead of returning a misleading candidate
        if best is None or best_norm > 1e-9 * scale:
            return None
        x_pol = best[:n]
        y_pol = np.zeros(data.m)
        y_pol[active] = best[n:]
        return x_pol, y_pol

    def _polish_candidate(self, data: QpData, x: np.ndarray, y: np.ndarray,
                          max_rounds: int = 10
                          ) -> tuple[np.ndarray, np.ndarray] | None:
        """Active-set solve seeded from an ADMM iterate.

        The working set starts from dual signs and near-active rows, then
        iterates: rows with wrong-signed multipliers leave, violated rows
        join.  Deterministic, bounded, and only ever accepted after an
        explicit KKT verification by the caller.
        """
        eq = data.lo == data.hi
        ax = data.A @ x
        y_tol = 1e-6 * max(1.0, float(np.max(np.abs(y))) if y.size else 0.0)
        near_up = np.isfinite(data.hi) & (
            (data.hi - ax) <= 1e-6 * (1.0 + np.abs(data.hi)))
        near_dn = np.isfinite(data.lo) & (
            (ax - data.lo) <= 1e-6 * (1.0 + np.abs(data.lo)))
        act_up = ~eq & ((y > y_tol) | near_up)
        act_dn = ~eq & ~act_up & ((y < -y_tol) | near_dn)

        seen = set()
        best = None
        for _ in range(max_rounds):
            key = (act_up.tobytes(), act_dn.tobytes())
            if key in seen:
                break
            seen.add(key)
            cand = self._solve_working_set(data, act_up, act_dn)
            if cand is None:
                return best
            x_pol, y_pol = cand
            sign_tol = 1e-9 * max(1.0, float(np.max(np.abs(y_pol))))
            wrong_up = act_up & (y_pol < -sign_tol)
            wrong_dn = act_dn & (y_pol > sign_tol)
            ax_pol = data.A @ x_pol
            feas_tol = 1e-9 * (1.0 + np.maximum(np.abs(data.hi),
                                                np.abs(data.lo)))
            feas_tol = np.where(np.isfinite(feas_tol), feas_tol, np.inf)
            viol_up = (~eq & ~act_up & np.isfinite(data.hi)
                       & (ax_pol > data.hi + feas_tol))
            viol_dn = (~eq & ~act_dn & np.isfinite(data.lo)
                       & (ax_pol < data.lo - feas_tol))
            y_clean = y_pol.copy()
            y_clean[wrong_up | wrong_dn] = 0.0
            best = (x_pol, y_clean)
            if not np.any(wrong_up | wrong_dn | viol_up | viol_dn):
                return best
            act_up = (act_up & ~wrong_up) | viol_up
            act_dn = (act_dn & ~wrong_dn & ~viol_up) | (viol_dn & ~act_up)
        return best

    def _meets_tolerance(self, data: QpData, res: tuple, x, y) -> bool:
        ax = data.A @ x
        prim_scale = float(max(np.max(np.abs(ax)), 0.0)) if data.m else 0.0
        dual_scale = float(max(
            np.max(np.abs(data.B @ x)),
            np.max(np.abs(data.A.T @ y)) if data.m else 0.0,
            np.max(np.abs(data.q)) if data.n else 0.0))
        return (res[0] <= self.eps_abs + self.eps_rel * prim_scale
                and res[1] <= self.eps_abs + self.eps_rel * dual_scale
                and res[2] <= max(self.eps_abs, 1e-8 * (1.0 + dual_scale)))

    def _polish_accept(self, data: QpData, x: np.ndarray, y: np.ndarray,
                       iterations: int) -> QpSolution | None:
        """Early exit: accept the polished point only if it certifies."""
        cand = self._polish_candidate(data, x, y)
        if cand is None:
            return None
        res = _kkt_residual(data, cand[0], cand[1])
        if self._meets_tolerance(data, res, cand[0], cand[1]):
            return QpSolution(cand[0], cand[1], Status.SOLVED, iterations,
                              polished=True, residuals=res)
        return None

    def _polish(self, data: QpData, sol: QpSolution) -> QpSolution:
        cand = self._polish_candidate(data, sol.primal, sol.dual)
        if cand is None:
            return sol
        res_pol = _kkt_residual(data, cand[0], cand[1])
        if max(res_pol) < max(sol.residuals):
            return QpSolution(cand[0], cand[1], Status.SOLVED, sol.iterations,
                              polished=True, residuals=res_pol)
        return sol


def solve(data: QpData, warm: WarmStart | None = None,
          tol: tuple[float, float] = (1e-8, 1e-8),
          max_iter: int = 20000, **settings) -> QpSolution:
    """One-shot solve with default settings."""
    solver = AdmmSolver(eps_abs=tol[0], eps_rel=tol[1], max_iter=max_iter,
                        **settings)
    return solver.solve(data, warm)


def save_debug(data: QpData, path) -> None:
    """Plain-text dump of (B, q, A, lo, hi) for offline inspection."""
    with open(path, "w") as fh:
        for name, mat in (("B", data.B), ("A", data.A)):
            coo = mat.tocoo()
            fh.write(f"matrix {name} {mat.shape[0]} {mat.shape[1]} {coo.nnz}\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
        for name, vec in (("q", data.q), ("lo", data.lo), ("hi", data.hi)):
            fh.write(f"vector {name} {vec.size}\n")
            for v in vec:
                fh.write(f"{float(v)!r}\n")


def load_debug(path) -> QpData:
    """Parse a dump written by :func:`save_debug`."""
    mats: dict[str, sp.coo_matrix] = {}
    vecs: dict[str, np.ndarray] = {}
    with open(path) as fh:
        lines = iter(fh.read().splitlines())
    for line in lines:
        head = line.split()
        if head[0] == "matrix":
            name, rows, cols, nnz = head[1], int(head[2]), int(head[3]), int(head[4])
            ijv = [next(lines).split() for _ in range(nnz)]
            i = [int(t[0]) for t in ijv]
            j = [int(t[1]) for t in ijv]
            v = [float(t[2]) for t in ijv]
            mats[name] = sp.coo_matrix((v, (i, j)), shape=(rows, cols))
        else:
            name, size = head[1], int(head[2])
            vecs[name] = np.array([float(next(lines)) for _ in range(size)])
    return QpData(B=mats["B"].tocsc(), q=vecs["q"], A=mats["A"].tocsc(),
                  lo=vecs["lo"], hi=vecs["hi"])
