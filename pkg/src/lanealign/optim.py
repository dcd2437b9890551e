"""Levenberg-Marquardt solver over mixed Euclidean / SE(3) variable blocks.

A problem is a set of named variable blocks plus residual blocks. Each
residual block references one or more variables, emits a fixed-dimension
residual, and may carry an information weighting (applied as a square-root
whitening) and a Huber robust kernel. SE(3) variables are updated through
6-dim right-tangent increments with quaternion renormalization.

Cost convention: sum over blocks of rho(||sqrt_info * r||^2), so scaling a
block's information matrix by s scales its cost contribution by s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import NumericalError, ValidationError
from .geometry import RigidTransform

EUCLIDEAN = "euclidean"
SE3 = "se3"

FD_STEP = 1e-6


@dataclass
class SolverSettings:
    max_iterations: int = 50
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 0.5
    max_damping: float = 1e12
    cost_tolerance: float = 1e-10      # relative change of accepted cost
    step_tolerance: float = 1e-12      # norm of the tangent step
    dense_parameter_limit: int = 50000

    def __post_init__(self):
        for name in ("max_iterations", "initial_damping", "damping_increase",
                     "damping_decrease", "max_damping", "cost_tolerance",
                     "step_tolerance", "dense_parameter_limit"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"SolverSettings.{name} must be positive")


class HuberKernel:
    """rho(s) = s for s <= a^2, else 2a*sqrt(s) - a^2 (s is the squared norm)."""

    def __init__(self, scale: float):
        if scale <= 0:
            raise ValidationError("Huber scale must be positive")
        self.scale = float(scale)

    def cost(self, s: float) -> float:
        a = self.scale
        if s <= a * a:
            return s
        return 2.0 * a * math.sqrt(s) - a * a

    def sqrt_weight(self, s: float) -> float:
        """Reweighting factor applied to whitened residual and Jacobian."""
        a = self.scale
        if s <= a * a or s == 0.0:
            return 1.0
        return math.sqrt(a / math.sqrt(s))


class ResidualBlock:
    """Base class for residual blocks.

    Subclasses set `keys` (variable names), `dim`, and optionally
    `sqrt_info` (scalar or matrix) and `loss` (a HuberKernel). They
    implement residual(*values) and, when an analytic Jacobian is
    available, jacobians(*values) returning one (dim, var_dim) array per
    referenced variable (var_dim is the tangent dimension for SE(3)).
    Returning None from jacobians() requests central finite differences.
    """

    keys: tuple = ()
    dim: int = 0
    sqrt_info = None
    loss: HuberKernel | None = None

    def residual(self, *values) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, *values):
        return None


class _Variable:
    __slots__ = ("kind", "value", "fixed", "offset", "tangent_dim")

    def __init__(self, kind, value, fixed):
        self.kind = kind
        self.value = value
        self.fixed = fixed
        self.offset = -1
        self.tangent_dim = 6 if kind == SE3 else np.asarray(value).size


def _retract(var: _Variable, delta: np.ndarray):
    if var.kind == SE3:
        return var.value.retract(delta)
    return var.value + delta


class LeastSquaresProblem:
    """Container of variable blocks and residual blocks."""

    def __init__(self):
        self._vars: dict[str, _Variable] = {}
        self._blocks: list[ResidualBlock] = []

    def add_variable(self, key: str, value, kind: str = EUCLIDEAN, fixed: bool = False):
        if key in self._vars:
            raise ValidationError(f"duplicate variable '{key}'")
        if kind == SE3:
            if not isinstance(value, RigidTransform):
                raise ValidationError("SE3 variable requires a RigidTransform value")
        elif kind == EUCLIDEAN:
            value = np.array(value, dtype=float).reshape(-1)
        else:
            raise ValidationError(f"unknown variable kind '{kind}'")
        self._vars[key] = _Variable(kind, value, fixed)

    def set_fixed(self, key: str, fixed: bool = True):
        self._vars[key].fixed = fixed

    def add_residual(self, block: ResidualBlock):
        for k in block.keys:
            if k not in self._vars:
                raise ValidationError(f"residual block references unknown variable '{k}'")
        if block.dim <= 0:
            raise ValidationError("residual block dimension must be positive")
        self._blocks.append(block)

    def value(self, key: str):
        return self._vars[key].value

    def values(self) -> dict:
        return {k: v.value for k, v in self._vars.items()}

    def set_value(self, key: str, value):
        var = self._vars[key]
        if var.kind == EUCLIDEAN:
            value = np.array(value, dtype=float).reshape(-1)
        var.value = value

    @property
    def blocks(self):
        return list(self._blocks)

    # -- evaluation helpers ------------------------------------------------

    def _block_values(self, block):
        return [self._vars[k].value for k in block.keys]

    def block_cost(self, block) -> float:
        r = _whiten(block, np.asarray(block.residual(*self._block_values(block)), dtype=float))
        s = float(r @ r)
        return block.loss.cost(s) if block.loss is not None else s

    def total_cost(self) -> float:
        return sum(self.block_cost(b) for b in self._blocks)


def _whiten(block, r):
    si = block.sqrt_info
    if si is None:
        return r
    if np.isscalar(si):
        return si * r
    return np.asarray(si) @ r


def _whiten_jac(block, j):
    si = block.sqrt_info
    if si is None:
        return j
    if np.isscalar(si):
        return si * j
    return np.asarray(si) @ j


def finite_difference_jacobians(block: ResidualBlock, values: list, step: float = FD_STEP):
    """Central-difference Jacobians of the raw (unwhitened) residual."""
    jacs = []
    for vi, val in enumerate(values):
        if isinstance(val, RigidTransform):
            dim = 6
        else:
            dim = np.asarray(val).size
        j = np.zeros((block.dim, dim))
        for k in range(dim):
            delta = np.zeros(dim)
            delta[k] = step
            if isinstance(val, RigidTransform):
                vp, vm = val.retract(delta), val.retract(-delta)
            else:
                vp, vm = val + delta, val - delta
            args_p = list(values)
            args_p[vi] = vp
            args_m = list(values)
            args_m[vi] = vm
            rp = np.asarray(block.residual(*args_p), dtype=float)
            rm = np.asarray(block.residual(*args_m), dtype=float)
            j[:, k] = (rp - rm) / (2.0 * step)
        jacs.append(j)
    return jacs


def check_jacobian(block: ResidualBlock, values: list, tolerance: float = 1e-5):
    """Compare a block's analytic Jacobians against central differences.

    Returns (passed, max_abs_error). Blocks without analytic Jacobians
    trivially pass.
    """
    analytic = block.jacobians(*values)
    if analytic is None:
        return True, 0.0
    numeric = finite_difference_jacobians(block, values)
    max_err = 0.0
    for ja, jn in zip(analytic, numeric):
        max_err = max(max_err, float(np.max(np.abs(np.asarray(ja) - jn))))
    return max_err <= tolerance, max_err


@dataclass
class IterationLog:
    iteration: int
    cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class SolverReport:
    iterations: int = 0
    accepted_steps: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    final_damping: float = 0.0
    log: list = field(default_factory=list)

    def format_log(self) -> str:
        lines = ["iter cost damping step_norm accepted"]
        for e in self.log:
            lines.append(f"{e.iteration} {e.cost:.12e} {e.damping:.3e} "
                         f"{e.step_norm:.3e} {int(e.accepted)}")
        return "\n".join(lines) + "\n"


def solve(problem: LeastSquaresProblem, settings: SolverSettings | None = None):
    """Run Levenberg-Marquardt; returns (values dict, SolverReport).

    The problem's variables are updated in place with the final iterate.
    """
    settings = settings or SolverSettings()
    free = [(k, v) for k, v in problem._vars.items() if not v.fixed]
    offset = 0
    for _, var in free:
        var.offset = offset
        offset += var.tangent_dim
    n_params = offset

    report = SolverReport()
    cost = problem.total_cost()
    report.initial_cost = cost
    report.final_cost = cost
    damping = settings.initial_damping
    report.final_damping = damping

    if n_params == 0 or not problem._blocks:
        report.converged = True
        return problem.values(), report

    use_sparse = n_params > settings.dense_parameter_limit
    need_linearize = True
    h = None if use_sparse else np.zeros((n_params, n_params))
    g = np.zeros(n_params)

    while report.iterations < settings.max_iterations:
        report.iterations += 1
        if need_linearize:
            g.fill(0.0)
            triplets = ([], [], []) if use_sparse else None
            if not use_sparse:
                h.fill(0.0)
            for block in problem._blocks:
                vals = problem._block_values(block)
                r = _whiten(block, np.asarray(block.residual(*vals), dtype=float))
                jacs = block.jacobians(*vals)
                if jacs is None:
                    jacs = finite_difference_jacobians(block, vals)
                jacs = [_whiten_jac(block, np.asarray(j, dtype=float)) for j in jacs]
                if block.loss is not None:
                    w = block.loss.sqrt_weight(float(r @ r))
                    if w != 1.0:
                        r = w * r
                        jacs = [w * j for j in jacs]
                entries = [(problem._vars[k], j) for k, j in zip(block.keys, jacs)
                           if not problem._vars[k].fixed]
                for va, ja in entries:
                    sa = slice(va.offset, va.offset + va.tangent_dim)
                    g[sa] += ja.T @ r
                    for vb, jb in entries:
                        if vb.offset < va.offset:
                            continue
                        hab = ja.T @ jb
                        if use_sparse:
                            rows, cols = np.meshgrid(
                                np.arange(va.offset, va.offset + va.tangent_dim),
                                np.arange(vb.offset, vb.offset + vb.tangent_dim),
                                indexing="ij")
                            triplets[0].append(rows.ravel())
                            triplets[1].append(cols.ravel())
                            triplets[2].append(hab.ravel())
                            if vb.offset > va.offset:
                                triplets[0].append(cols.ravel())
                                triplets[1].append(rows.ravel())
                                triplets[2].append(hab.ravel())
                        else:
                            h[sa, vb.offset:vb.offset + vb.tangent_dim] += hab
            if use_sparse:
                h = scipy.sparse.coo_matrix(
                    (np.concatenate(triplets[2]),
                     (np.concatenate(triplets[0]), np.concatenate(triplets[1]))),
                    shape=(n_params, n_params)).tocsc()
            else:
                ih, jh = np.tril_indices(n_params, -1)
                h[ih, jh] = h[jh, ih]
            need_linearize = False

        diag = np.maximum(h.diagonal() if use_sparse else np.diag(h), 1e-12)
        solved = False
        while not solved:
            try:
                if use_sparse:
                    aug = (h + scipy.sparse.diags(damping * diag)).tocsc()
                    lu = scipy.sparse.linalg.splu(aug)
                    delta = lu.solve(-g)
                    if not np.all(np.isfinite(delta)):
                        raise scipy.linalg.LinAlgError("singular sparse system")
                else:
                    cf = scipy.linalg.cho_factor(h + np.diag(damping * diag), lower=True)
                    delta = scipy.linalg.cho_solve(cf, -g)
                solved = True
            except (scipy.linalg.LinAlgError, RuntimeError):
                damping *= settings.damping_increase
                if damping > settings.max_damping:
                    raise NumericalError(
                        f"normal-equation solve failed at iteration {report.iterations}")
        step_norm = float(np.linalg.norm(delta))
        if step_norm < settings.step_tolerance:
            report.converged = True
            report.log.append(IterationLog(report.iterations, cost, damping, step_norm, False))
            break

        saved = {k: var.value for k, var in free}
        for k, var in free:
            var.value = _retract(var, delta[var.offset:var.offset + var.tangent_dim])
        trial_cost = problem.total_cost()

        if trial_cost < cost:
            rel_change = (cost - trial_cost) / max(cost, 1e-300)
            cost = trial_cost
            report.accepted_steps += 1
            damping = max(damping * settings.damping_decrease, 1e-12)
            need_linearize = True
            report.log.append(IterationLog(report.iterations, cost, damping, step_norm, True))
            if rel_change < settings.cost_tolerance:
                report.converged = True
                break
        else:
            for k, var in free:
                var.value = saved[k]
            damping *= settings.damping_increase
            report.log.append(IterationLog(report.iterations, cost, damping, step_norm, False))
            if damping > settings.max_damping:
                report.converged = True
                break

    report.final_cost = cost
    report.final_damping = damping
    return problem.values(), report
