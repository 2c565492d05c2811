"""Stage-structured nonlinear programs and an IPOPT-backed solver contract.

A problem family is described once by a :class:`StageStructure` (symbolic
stage functions and dimensions) and instantiated by :class:`StageNlp`
(per-node parameters, bounds, optional initial-state pin).  Solvers are
compiled once per structure and reused, which is what makes receding-horizon
use cheap.

Variables are stored node-major, ``[x_0, u_0, x_1, u_1, ...]``, and the
solver works on variables divided by the structure's characteristic scales.
Constraint rows are ordered as dynamics links, the optional cyclic link, then
path inequalities (``<= 0``).  Link residuals are divided by the state scale.
"""

from __future__ import annotations

import contextlib
import functools
import logging
import os
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass, field

import casadi as ca
import numpy as np
import scipy.sparse as sp

from .params import SolverTolerances

log = logging.getLogger(__name__)


class NlpValidationError(ValueError):
    """Problem data is inconsistent (dimensions, empty boxes, ...)."""


class NlpError(RuntimeError):
    """Solve did not meet the solution contract.

    ``solution`` carries the best iterate seen: the lowest-objective
    feasible iterate if any, otherwise the least infeasible one.
    """

    def __init__(self, message: str, solution: "NlpSolution"):
        super().__init__(message)
        self.solution = solution


class MaxIterationsError(NlpError):
    pass


class RestorationFailedError(NlpError):
    pass


class EvaluationError(NlpError):
    """Repeated non-finite function values (domain-error cascade)."""


class InfeasibleProblemError(NlpError):
    pass


_STATUS_ERRORS = {
    "Maximum_Iterations_Exceeded": MaxIterationsError,
    "Maximum_CpuTime_Exceeded": MaxIterationsError,
    "Maximum_WallTime_Exceeded": MaxIterationsError,
    "Restoration_Failed": RestorationFailedError,
    "Invalid_Number_Detected": EvaluationError,
    "Infeasible_Problem_Detected": InfeasibleProblemError,
}


@dataclass(eq=False)
class StageStructure:
    n_nodes: int
    nx: int
    nu: int
    n_param: int
    cost: ca.Function
    dynamics: ca.Function | None = None
    path: ca.Function | None = None
    cyclic: bool = False
    path_from: int = 0
    x_scale: np.ndarray | None = None
    u_scale: np.ndarray | None = None
    name: str = "stage_nlp"
    jit: bool = False
    _compiled: "_Compiled | None" = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_nodes < 1:
            raise NlpValidationError("need at least one node")
        if self.cyclic and self.dynamics is None:
            raise NlpValidationError("a cyclic link needs dynamics")
        self.x_scale = np.ones(self.nx) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)
        self.u_scale = np.ones(self.nu) if self.u_scale is None else np.asarray(self.u_scale, dtype=float)
        if self.x_scale.shape != (self.nx,) or self.u_scale.shape != (self.nu,):
            raise NlpValidationError("scale vectors must match nx and nu")
        if np.any(self.x_scale <= 0) or np.any(self.u_scale <= 0):
            raise NlpValidationError("scales must be positive")
        dims = [self.nx, self.nu, self.n_param]
        for fn, n_out in ((self.cost, 1), (self.dynamics, self.nx), (self.path, None)):
            if fn is None:
                continue
            if fn.n_in() != 3 or [fn.numel_in(i) for i in range(3)] != dims:
                raise NlpValidationError(f"{fn.name()} must take (x[{self.nx}], u[{self.nu}], p[{self.n_param}])")
            if n_out is not None and fn.numel_out(0) != n_out:
                raise NlpValidationError(f"{fn.name()} must return {n_out} values")

    @property
    def n_path(self) -> int:
        return 0 if self.path is None else self.path.numel_out(0)

    @property
    def n_var(self) -> int:
        return self.n_nodes * (self.nx + self.nu)

    @property
    def n_links(self) -> int:
        if self.dynamics is None:
            return 0
        return (self.n_nodes - 1 + int(self.cyclic)) * self.nx

    @property
    def n_con(self) -> int:
        return self.n_links + (self.n_nodes - self.path_from) * self.n_path

    def var_scale(self) -> np.ndarray:
        return np.tile(np.concatenate([self.x_scale, self.u_scale]), self.n_nodes)

    def compiled(self) -> "_Compiled":
        if self._compiled is None:
            self._compiled = _Compiled(self)
        return self._compiled


@dataclass(eq=False)
class StageNlp:
    structure: StageStructure
    params: np.ndarray
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    x_init: np.ndarray | None = None

    def __post_init__(self):
        st = self.structure
        n = st.n_nodes
        self.params = np.asarray(self.params, dtype=float).reshape(n, st.n_param)
        self.x_lb = np.broadcast_to(np.asarray(self.x_lb, dtype=float), (n, st.nx)).copy()
        self.x_ub = np.broadcast_to(np.asarray(self.x_ub, dtype=float), (n, st.nx)).copy()
        self.u_lb = np.broadcast_to(np.asarray(self.u_lb, dtype=float), (n, st.nu)).copy()
        self.u_ub = np.broadcast_to(np.asarray(self.u_ub, dtype=float), (n, st.nu)).copy()
        if self.x_init is not None:
            self.x_init = np.asarray(self.x_init, dtype=float).reshape(st.nx)
        if np.any(self.x_lb > self.x_ub) or np.any(self.u_lb > self.u_ub):
            raise NlpValidationError("infeasible variable box: lower bound exceeds upper bound")
        if not np.all(np.isfinite(self.params)):
            raise NlpValidationError("parameters must be finite")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Scaled variable bounds as flat node-major vectors."""
        lbx, ubx = self.x_lb.copy(), self.x_ub.copy()
        if self.x_init is not None:
            lbx[0] = ubx[0] = self.x_init
        scale = self.structure.var_scale()
        lb = np.hstack([lbx, self.u_lb]).ravel() / scale
        ub = np.hstack([ubx, self.u_ub]).ravel() / scale
        return lb, ub

    def constraint_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        st = self.structure
        n_path = st.n_con - st.n_links
        lbg = np.concatenate([np.zeros(st.n_links), np.full(n_path, -np.inf)])
        ubg = np.zeros(st.n_con)
        return lbg, ubg

    def pack(self, X, U) -> np.ndarray:
        """Flatten unscaled ``(X, U)`` into the scaled node-major vector."""
        st = self.structure
        X = np.asarray(X, dtype=float).reshape(st.n_nodes, st.nx)
        U = np.asarray(U, dtype=float).reshape(st.n_nodes, st.nu)
        return np.hstack([X, U]).ravel() / st.var_scale()

    def unpack(self, w) -> tuple[np.ndarray, np.ndarray]:
        st = self.structure
        z = (np.asarray(w, dtype=float).ravel() * st.var_scale()).reshape(st.n_nodes, st.nx + st.nu)
        return z[:, :st.nx].copy(), z[:, st.nx:].copy()

    def flat_params(self) -> np.ndarray:
        return self.params.ravel()


@dataclass
class NlpSolution:
    X: np.ndarray
    U: np.ndarray
    objective: float
    stationarity: float
    max_violation: float
    iterations: int
    wall_time: float
    status: str
    success: bool
    w: np.ndarray
    lam_g: np.ndarray
    lam_x: np.ndarray

    def stats(self) -> dict:
        return {
            "status": self.status,
            "success": self.success,
            "objective": self.objective,
            "stationarity": self.stationarity,
            "max_violation": self.max_violation,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
        }


@dataclass(frozen=True)
class SolveOptions:
    """IPOPT settings that change the compiled solver (hashable cache key).

    ``track_best`` records the best iterate for failure reports at the cost
    of one Python callback per iteration.
    """

    warm_start: bool = False
    mu_init: float = 0.1
    print_level: int = 0
    linear_solver: str = "mumps"
    acceptable_iter: int = 15
    track_best: bool = True


class _BestIterate(ca.Callback):
    """Iteration callback remembering the best iterate for failure reports."""

    def __init__(self, name, n_var, n_con):
        ca.Callback.__init__(self)
        self.n_var, self.n_con = n_var, n_con
        self.reset(None, None, None, None, 0.0)
        self.construct(name, {})

    def reset(self, lbx, ubx, lbg, ubg, tol_feas):
        self.lbx, self.ubx, self.lbg, self.ubg = lbx, ubx, lbg, ubg
        self.tol_feas = tol_feas
        self.best = None  # (feasible, key, w)

    def get_n_in(self):
        return ca.nlpsol_n_out()

    def get_n_out(self):
        return 1

    def get_name_in(self, i):
        return ca.nlpsol_out(i)

    def get_name_out(self, i):
        return "ret"

    def get_sparsity_in(self, i):
        name = ca.nlpsol_out(i)
        if name == "f":
            return ca.Sparsity.scalar()
        if name in ("x", "lam_x"):
            return ca.Sparsity.dense(self.n_var)
        if name in ("g", "lam_g"):
            return ca.Sparsity.dense(self.n_con)
        return ca.Sparsity(0, 0)

    def eval(self, arg):
        if self.lbx is None:
            return [0]
        w = np.array(arg[0]).ravel()
        f = float(arg[1])
        g = np.array(arg[2]).ravel()
        viol = _violation(w, g, self.lbx, self.ubx, self.lbg, self.ubg)
        feasible = viol <= self.tol_feas
        key = f if feasible else viol
        if np.isfinite(key) and (
            self.best is None
            or (feasible and not self.best[0])
            or (feasible == self.best[0] and key < self.best[1])
        ):
            self.best = (feasible, key, w)
        return [0]


def _violation(w, g, lbx, ubx, lbg, ubg) -> float:
    parts = [0.0]
    if w.size:
        parts.append(float(np.max(np.maximum(lbx - w, 0.0))))
        parts.append(float(np.max(np.maximum(w - ubx, 0.0))))
    if g.size:
        parts.append(float(np.max(np.maximum(lbg - g, 0.0))))
        parts.append(float(np.max(np.maximum(g - ubg, 0.0))))
    out = max(parts)
    return out if np.isfinite(out) else np.inf


@functools.lru_cache(maxsize=None)
def _jit_options() -> dict:
    """casadi JIT settings; generated objects go to :func:`_jit_dir`."""
    return {
        "jit": True,
        "compiler": "shell",
        "jit_options": {"flags": ["-O1"], "verbose": False, "directory": _jit_dir()},
    }


@functools.lru_cache(maxsize=None)
def _jit_dir() -> str:
    tmp = os.path.join(tempfile.gettempdir(), "curvrace_jit")
    os.makedirs(tmp, exist_ok=True)
    return tmp


_CWD_LOCK = threading.Lock()


@contextlib.contextmanager
def _in_jit_dir():
    """Run with the JIT directory as working directory.

    casadi also writes a copy of the generated solver source into the
    current directory and does not remove it.
    """
    with _CWD_LOCK:
        old = os.getcwd()
        os.chdir(_jit_dir())
        try:
            yield
        finally:
            os.chdir(old)


@functools.lru_cache(maxsize=None)
def jit_available() -> bool:
    """True when a C compiler is on the path and ``CURVRACE_NO_JIT`` is unset."""
    if os.environ.get("CURVRACE_NO_JIT"):
        return False
    return shutil.which(os.environ.get("CC", "gcc")) is not None


def _assemble(st: StageStructure, sym):
    n, nx, nu = st.n_nodes, st.nx, st.nu
    nv = nx + nu
    W = sym.sym("w", n * nv)
    P = sym.sym("p", n * st.n_param)
    scale = ca.DM(np.concatenate([st.x_scale, st.u_scale]))
    Z = ca.reshape(W, nv, n) * ca.repmat(scale, 1, n)
    X, U = Z[:nx, :], Z[nx:, :]
    Pm = ca.reshape(P, st.n_param, n)
    inv_xs = ca.DM(1.0 / st.x_scale)

    f = ca.sum2(st.cost.map(n)(X, U, Pm))
    g_parts = []
    if st.dynamics is not None and n > 1:
        nxt = st.dynamics.map(n - 1)(X[:, :-1], U[:, :-1], Pm[:, :-1])
        g_parts.append(ca.vec((nxt - X[:, 1:]) * ca.repmat(inv_xs, 1, n - 1)))
    if st.cyclic:
        wrap = st.dynamics(X[:, -1], U[:, -1], Pm[:, -1])
        g_parts.append((wrap - X[:, 0]) * inv_xs)
    if st.path is not None and n > st.path_from:
        m = n - st.path_from
        h = st.path.map(m)(X[:, st.path_from:], U[:, st.path_from:], Pm[:, st.path_from:])
        g_parts.append(ca.vec(h))
    g = ca.vertcat(*g_parts) if g_parts else sym(0, 1)
    return W, P, f, g


class _Compiled:
    def __init__(self, st: StageStructure):
        self.n_var = st.n_nodes * (st.nx + st.nu)
        self.name = st.name
        self.jit = st.jit and jit_available()
        W, P, f, g = _assemble(st, ca.SX)
        self.n_con = g.numel()
        self.f_fun = ca.Function("f", [W, P], [f])
        self.g_fun = ca.Function("g", [W, P], [g])
        self.grad_f = ca.Function("grad_f", [W, P], [ca.gradient(f, W)])
        self.jac_g = ca.Function("jac_g", [W, P], [ca.jacobian(g, W)])
        self._sx_problem = {"x": W, "p": P, "f": f, "g": g}
        if self.jit:
            # Mapped stage functions stay loops in the generated code, so the
            # compile time does not grow with the number of nodes.
            W, P, f, g = _assemble(st, ca.MX)
        self.problem = {"x": W, "p": P, "f": f, "g": g}
        self._solvers: dict = {}

    def solver(self, tol: SolverTolerances, opts: SolveOptions):
        key = (tol, opts)
        if key not in self._solvers:
            cb = None
            if opts.track_best:
                cb = _BestIterate(f"{self.name}_cb_{len(self._solvers)}", self.n_var, self.n_con)
            ipopt = {
                "tol": 0.1 * tol.tol_stat,
                "dual_inf_tol": 0.1 * tol.tol_stat,
                "constr_viol_tol": 0.1 * tol.tol_feas,
                "compl_inf_tol": 0.1 * tol.tol_stat,
                "acceptable_tol": tol.tol_stat,
                "acceptable_constr_viol_tol": tol.tol_feas,
                "acceptable_dual_inf_tol": tol.tol_stat,
                "acceptable_compl_inf_tol": tol.tol_stat,
                "acceptable_iter": opts.acceptable_iter,
                "max_iter": int(tol.max_iter),
                "nlp_scaling_method": "none",
                "print_level": opts.print_level,
                "sb": "yes",
                "linear_solver": opts.linear_solver,
                "mu_init": opts.mu_init,
            }
            if opts.warm_start:
                ipopt.update({
                    "warm_start_init_point": "yes",
                    "warm_start_bound_push": 1e-6,
                    "warm_start_bound_frac": 1e-6,
                    "warm_start_slack_bound_push": 1e-6,
                    "warm_start_slack_bound_frac": 1e-6,
                    "warm_start_mult_bound_push": 1e-6,
                })
            nlp_opts = {
                "ipopt": ipopt,
                "print_time": False,
            }
            if cb is not None:
                nlp_opts["iteration_callback"] = cb
                nlp_opts["iteration_callback_ignore_errors"] = False
            name = f"{self.name}_{len(self._solvers)}"
            solver = None
            if self.jit:
                try:
                    with _in_jit_dir():
                        solver = ca.nlpsol(name, "ipopt", self.problem, {**nlp_opts, **_jit_options()})
                except RuntimeError as exc:  # compiler missing or failing: interpret instead
                    log.warning("JIT compilation failed, using the interpreted problem: %s", exc)
                    self.jit = False
                    self.problem = self._sx_problem
            if solver is None:
                solver = ca.nlpsol(name, "ipopt", self.problem, nlp_opts)
            self._solvers[key] = (solver, cb)
        return self._solvers[key]


def evaluate(nlp: StageNlp, X, U) -> tuple[float, np.ndarray]:
    """Objective and constraint vector at an unscaled point."""
    c = nlp.structure.compiled()
    w, p = nlp.pack(X, U), nlp.flat_params()
    return float(c.f_fun(w, p)), np.array(c.g_fun(w, p)).ravel()


def evaluate_derivatives(nlp: StageNlp, X, U) -> tuple[np.ndarray, sp.csc_matrix]:
    """Objective gradient and constraint Jacobian with respect to the unscaled variables.

    Derivatives are exact (casadi algorithmic differentiation).  Column
    ordering follows the node-major variable layout.
    """
    st = nlp.structure
    c = st.compiled()
    w, p = nlp.pack(X, U), nlp.flat_params()
    inv = 1.0 / st.var_scale()
    grad = np.array(c.grad_f(w, p)).ravel() * inv
    jac = c.jac_g(w, p).tocsc() @ sp.diags(inv)
    return grad, sp.csc_matrix(jac)


def declared_blocks(structure: StageStructure) -> set[tuple[int, int]]:
    """(constraint-block, node) pairs the stage structure allows to be nonzero.

    Constraint blocks are numbered in row order: one per dynamics link, one
    for the cyclic link, one per constrained node's path constraints.
    """
    st = structure
    allowed = set()
    b = 0
    if st.dynamics is not None:
        for k in range(st.n_nodes - 1):
            allowed |= {(b, k), (b, k + 1)}
            b += 1
        if st.cyclic:
            allowed |= {(b, st.n_nodes - 1), (b, 0)}
            b += 1
    if st.path is not None:
        for k in range(st.path_from, st.n_nodes):
            allowed.add((b, k))
            b += 1
    return allowed


def jacobian_blocks(structure: StageStructure) -> set[tuple[int, int]]:
    """(constraint-block, node) pairs with structural nonzeros in the compiled Jacobian."""
    st = structure
    c = st.compiled()
    spy = c.jac_g.sparsity_out(0)
    rows, cols = spy.get_triplet()
    row_block = np.empty(c.n_con, dtype=int)
    r, b = 0, 0
    if st.dynamics is not None:
        for _ in range(st.n_nodes - 1 + int(st.cyclic)):
            row_block[r:r + st.nx] = b
            r += st.nx
            b += 1
    if st.path is not None:
        for _ in range(st.path_from, st.n_nodes):
            row_block[r:r + st.n_path] = b
            r += st.n_path
            b += 1
    node = np.asarray(cols) // (st.nx + st.nu)
    return set(zip(row_block[np.asarray(rows, dtype=int)].tolist(), node.tolist()))


def _stationarity(grad_f, jac, lam_g, lam_x, free) -> float:
    grad_l = grad_f + jac.T @ lam_g + lam_x
    n, m = grad_f.size, lam_g.size
    s_d = max(100.0, (np.abs(lam_g).sum() + np.abs(lam_x).sum()) / max(n + m, 1)) / 100.0
    if not np.any(free):
        return 0.0
    return float(np.max(np.abs(grad_l[free]))) / s_d


def solve(
    nlp: StageNlp,
    initial_guess=None,
    tolerances: SolverTolerances | None = None,
    options: SolveOptions | None = None,
    duals: tuple[np.ndarray, np.ndarray] | None = None,
) -> NlpSolution:
    """Solve ``nlp`` and verify the result from scratch.

    ``initial_guess`` is ``(X, U)`` in unscaled units (defaults to the box
    midpoint clipped to finite values).  ``duals`` optionally passes
    ``(lam_g, lam_x)`` from a previous solution for warm starts.

    Success means the post-solve stationarity residual is at most
    ``tol_stat`` and the maximum scaled constraint or bound violation is at
    most ``tol_feas``.  Otherwise a subclass of :class:`NlpError` is raised
    carrying the best iterate.
    """
    tol = tolerances or SolverTolerances()
    opts = options or SolveOptions()
    st = nlp.structure
    c = st.compiled()
    lbx, ubx = nlp.bounds()
    lbg, ubg = nlp.constraint_bounds()
    p = nlp.flat_params()

    if initial_guess is None:
        mid = np.where(np.isfinite(lbx) & np.isfinite(ubx), 0.5 * (lbx + ubx), 0.0)
        w0 = np.clip(mid, lbx, ubx)
    else:
        X0, U0 = initial_guess
        X0 = np.asarray(X0, dtype=float)
        U0 = np.asarray(U0, dtype=float)
        if X0.shape != (st.n_nodes, st.nx) or U0.shape != (st.n_nodes, st.nu):
            raise NlpValidationError(
                f"initial guess must be X{(st.n_nodes, st.nx)}, U{(st.n_nodes, st.nu)}; "
                f"got {X0.shape}, {U0.shape}")
        w0 = np.clip(nlp.pack(X0, U0), lbx, ubx)
    if not np.all(np.isfinite(w0)):
        raise NlpValidationError("initial guess must be finite")

    solver, cb = c.solver(tol, opts)
    if cb is not None:
        cb.reset(lbx, ubx, lbg, ubg, tol.tol_feas)
    args = dict(x0=w0, p=p, lbx=lbx, ubx=ubx, lbg=lbg, ubg=ubg)
    if duals is not None:
        args["lam_g0"], args["lam_x0"] = duals
    t0 = time.perf_counter()
    out = solver(**args)
    wall = time.perf_counter() - t0
    stats = solver.stats()
    status = stats.get("return_status", "unknown")
    iters = int(stats.get("iter_count", -1))

    w = np.array(out["x"]).ravel()
    lam_g = np.array(out["lam_g"]).ravel()
    lam_x = np.array(out["lam_x"]).ravel()
    sol = _assess(nlp, c, w, p, lam_g, lam_x, lbx, ubx, lbg, ubg, status, iters, wall)
    if sol.stationarity <= tol.tol_stat and sol.max_violation <= tol.tol_feas:
        sol.success = True
        return sol

    best = sol
    if cb is not None and cb.best is not None and not (sol.max_violation <= tol.tol_feas):
        best = _assess(nlp, c, cb.best[2], p, np.zeros_like(lam_g), np.zeros_like(lam_x),
                       lbx, ubx, lbg, ubg, status, iters, wall)
    err = _STATUS_ERRORS.get(status, NlpError)
    raise err(
        f"{st.name}: solver status {status}; stationarity {sol.stationarity:.3e} "
        f"(tol {tol.tol_stat:.1e}), violation {sol.max_violation:.3e} (tol {tol.tol_feas:.1e})",
        best,
    )


def _assess(nlp, c, w, p, lam_g, lam_x, lbx, ubx, lbg, ubg, status, iters, wall) -> NlpSolution:
    f = float(c.f_fun(w, p))
    g = np.array(c.g_fun(w, p)).ravel()
    grad = np.array(c.grad_f(w, p)).ravel()
    jac = c.jac_g(w, p).tocsc()
    free = lbx < ubx
    if not (np.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(grad))):
        viol, stat = np.inf, np.inf
    else:
        viol = _violation(w, g, lbx, ubx, lbg, ubg)
        stat = _stationarity(grad, jac, lam_g, lam_x, free)
    X, U = nlp.unpack(w)
    return NlpSolution(X, U, f, stat, viol, iters, wall, status, False, w, lam_g, lam_x)
