"""Factor-graph nonlinear least squares with a Levenberg-Marquardt solver.

A graph holds manifold variables (anything with ``dim`` and ``retract``) and
factors whose residuals are whitened by a square-root information matrix.
The cost is ``sum_f e_f^T Sigma_f^{-1} e_f``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg.lapack import dgeqrf as _geqrf
from scipy.linalg.lapack import dtrtrs as _trtrs

log = logging.getLogger(__name__)

KINDS = ("state", "wrench", "rotor")


class Key(NamedTuple):
    kind: str
    index: int

    def __str__(self) -> str:
        return f"{self.kind[0]}{self.index}"


def X(i: int) -> Key:
    return Key("state", i)


def W(i: int) -> Key:
    return Key("wrench", i)


def U(i: int) -> Key:
    return Key("rotor", i)


class NoiseModel:
    """Gaussian noise stored as an upper-triangular square-root information matrix."""

    def __init__(self, sqrt_info: np.ndarray):
        self.sqrt_info = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
        n = self.sqrt_info.shape[0]
        if self.sqrt_info.shape != (n, n):
            raise ValueError("sqrt_info must be square")
        off = self.sqrt_info - np.diag(np.diag(self.sqrt_info))
        self._diag = np.diag(self.sqrt_info).copy() if not off.any() else None

    @classmethod
    def from_covariance(cls, cov) -> "NoiseModel":
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
            d = np.diag(cov)
            if np.any(d <= 0):
                raise ValueError("covariance must be positive definite")
            return cls(np.diag(1.0 / np.sqrt(d)))
        try:
            L = np.linalg.cholesky(np.linalg.inv(cov))
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        return cls(L.T)

    @classmethod
    def from_sigmas(cls, sigmas) -> "NoiseModel":
        s = np.asarray(sigmas, dtype=float).reshape(-1)
        return cls.from_covariance(np.diag(s * s))

    @classmethod
    def isotropic(cls, dim: int, sigma: float) -> "NoiseModel":
        return cls.from_sigmas(np.full(dim, sigma))

    @property
    def dim(self) -> int:
        return self.sqrt_info.shape[0]

    def whiten(self, e: np.ndarray) -> np.ndarray:
        if self._diag is not None:
            return self._diag * e
        return self.sqrt_info @ e

    def whiten_jacobian(self, J: np.ndarray) -> np.ndarray:
        if self._diag is not None:
            return self._diag[:, None] * J
        return self.sqrt_info @ J

    def whiten_many(self, E: np.ndarray) -> np.ndarray:
        """Whiten stacked errors of shape ``(n, d)``."""
        if self._diag is not None:
            return E * self._diag
        return E @ self.sqrt_info.T

    def whiten_jacobian_many(self, J: np.ndarray) -> np.ndarray:
        """Whiten stacked Jacobians of shape ``(n, d, k)``."""
        if self._diag is not None:
            return J * self._diag[:, None]
        return np.einsum("ij,njk->nik", self.sqrt_info, J)


def numerical_jacobians(residual: Callable, values: Sequence, h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``residual(*values)`` in each variable's tangent space."""
    values = list(values)
    e0 = np.asarray(residual(*values), dtype=float)
    Js = []
    for k, val in enumerate(values):
        J = np.zeros((e0.shape[0], val.dim))
        for c in range(val.dim):
            d = np.zeros(val.dim)
            d[c] = h
            plus = values.copy()
            minus = values.copy()
            plus[k] = val.retract(d)
            minus[k] = val.retract(-d)
            J[:, c] = (np.asarray(residual(*plus)) - np.asarray(residual(*minus))) / (2.0 * h)
        Js.append(J)
    return Js


class Factor:
    """A residual on an ordered tuple of variables.

    ``residual(*values)`` returns the unwhitened error. ``jacobian(*values)``,
    when given, returns ``(error, [J_1, ..., J_k])`` with one block per key in
    right-perturbation tangent coordinates; otherwise central differences are
    used.
    """

    def __init__(
        self,
        keys: Sequence[Key],
        noise: NoiseModel,
        residual: Callable,
        jacobian: Callable | None = None,
        name: str = "factor",
    ):
        self.keys = tuple(keys)
        self.noise = noise
        self._residual = residual
        self._jacobian = jacobian
        self.name = name

    @property
    def dim(self) -> int:
        return self.noise.dim

    def error_vector(self, *values) -> np.ndarray:
        return np.asarray(self._residual(*values), dtype=float)

    def linearize(self, *values) -> tuple[np.ndarray, list[np.ndarray]]:
        if self._jacobian is not None:
            e, Js = self._jacobian(*values)
            return np.asarray(e, dtype=float), list(Js)
        return self.error_vector(*values), numerical_jacobians(self._residual, values)

    def whitened_error(self, *values) -> np.ndarray:
        return self.noise.whiten(self.error_vector(*values))

    def batch_key(self):
        """Factors returning equal non-``None`` keys are evaluated in one call."""
        return None

    @classmethod
    def error_many(cls, factors: Sequence["Factor"], values: Sequence[Sequence]) -> np.ndarray:
        """Stacked errors ``(n, d)``; ``values[n]`` holds the variables of ``factors[n]``."""
        return np.stack([f.error_vector(*v) for f, v in zip(factors, values)])

    @classmethod
    def linearize_many(cls, factors, values) -> tuple[np.ndarray, list[np.ndarray]]:
        """Stacked errors and one ``(n, d, dim_k)`` Jacobian stack per key slot."""
        out = [f.linearize(*v) for f, v in zip(factors, values)]
        E = np.stack([e for e, _ in out])
        Js = [np.stack([Js[k] for _, Js in out]) for k in range(len(out[0][1]))]
        return E, Js

    def __repr__(self) -> str:
        return f"{self.name}({', '.join(map(str, self.keys))})"


class BatchFactor(Factor):
    """Base for factor types that compute many instances with array operations.

    Subclasses implement :meth:`error_many` and :meth:`linearize_many`; the
    single-instance methods are derived from them.
    """

    def __init__(self, keys: Sequence[Key], noise: NoiseModel, name: str):
        super().__init__(keys, noise, residual=None, name=name)

    def shared(self) -> tuple:
        """Hashable constants that must agree for two factors to share a batch."""
        return ()

    def batch_key(self):
        return (type(self), id(self.noise)) + self.shared()

    def error_vector(self, *values) -> np.ndarray:
        return self.error_many([self], [values])[0]

    def linearize(self, *values):
        E, Js = self.linearize_many([self], [values])
        return E[0], [J[0] for J in Js]


def _check_finite(factors, E, Js=()) -> None:
    if not np.isfinite(E).all() or not all(np.isfinite(J).all() for J in Js):
        raise FloatingPointError(f"non-finite residual or Jacobian in {factors[0]!r} group")


class FactorGraph:
    def __init__(self):
        self.values: dict[Key, object] = {}
        self.factors: list[Factor] = []
        self._groups: list[list[Factor]] | None = None

    def add_variable(self, key: Key, initial) -> "FactorGraph":
        key = Key(*key)
        if key.index < 0:
            raise ValueError(f"negative time index in {key}")
        if key in self.values:
            raise KeyError(f"duplicate variable {key}")
        self.values[key] = initial
        return self

    def add_factor(self, factor: Factor) -> "FactorGraph":
        missing = [k for k in factor.keys if k not in self.values]
        if missing:
            raise KeyError(f"{factor!r} references unknown variables {missing}")
        self.factors.append(factor)
        self._groups = None
        return self

    def groups(self) -> list[list[Factor]]:
        """Factors partitioned into batches that share one evaluation call."""
        if self._groups is None:
            by_key: dict = {}
            groups = []
            for f in self.factors:
                bk = f.batch_key()
                if bk is None:
                    groups.append([f])
                elif bk in by_key:
                    by_key[bk].append(f)
                else:
                    by_key[bk] = [f]
                    groups.append(by_key[bk])
            self._groups = groups
        return self._groups

    @property
    def tangent_dim(self) -> int:
        return sum(v.dim for v in self.values.values())

    @property
    def residual_dim(self) -> int:
        return sum(f.dim for f in self.factors)

    def ordering(self) -> dict[Key, slice]:
        out, col = {}, 0
        for k, v in self.values.items():
            out[k] = slice(col, col + v.dim)
            col += v.dim
        return out

    def count(self, name: str) -> int:
        return sum(f.name == name for f in self.factors)

    def error(self, values: dict | None = None) -> float:
        values = self.values if values is None else values
        total = 0.0
        for fs in self.groups():
            E = type(fs[0]).error_many(fs, [[values[k] for k in f.keys] for f in fs])
            _check_finite(fs, E)
            Ew = fs[0].noise.whiten_many(E)
            total += float(np.einsum("ij,ij->", Ew, Ew))
        return total

    def linearize(self, values: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Stacked whitened Jacobian ``J`` and right-hand side ``b = -e``.

        The Gauss-Newton step solves ``min |J d - b|^2``.
        """
        values = self.values if values is None else values
        order = self.ordering()
        J = np.zeros((self.residual_dim, self.tangent_dim))
        b = np.zeros(self.residual_dim)
        row = 0
        for f in self.factors:
            e, Js = f.linearize(*(values[k] for k in f.keys))
            _check_finite([f], np.asarray(e), Js)
            rows = slice(row, row + f.dim)
            b[rows] = -f.noise.whiten(e)
            for k, Jk in zip(f.keys, Js):
                J[rows, order[k]] += f.noise.whiten_jacobian(Jk)
            row += f.dim
        return J, b

    def retract(self, values: dict, delta: np.ndarray) -> dict:
        order = self.ordering()
        return {k: v.retract(delta[order[k]]) for k, v in values.items()}

    def dump(self, values: dict | None = None) -> str:
        """Human-readable listing of factors, dimensions and whitened errors."""
        values = self.values if values is None else values
        lines = [f"graph: {len(self.values)} variables (dim {self.tangent_dim}), "
                 f"{len(self.factors)} factors (dim {self.residual_dim})"]
        for f in self.factors:
            e = f.whitened_error(*(values[k] for k in f.keys))
            lines.append(f"  {f!r:40s} dim={f.dim:2d} err={float(e @ e):.6g}")
        lines.append(f"total error {self.error(values):.9g}")
        return "\n".join(lines)


@dataclass
class LMConfig:
    max_iter: int = 50
    lambda_init: float = 1e-4
    lambda_scale: float = 10.0
    abs_tol: float = 1e-8
    rel_tol: float = 1e-6
    lambda_max: float = 1e10
    lambda_min: float = 1e-12


@dataclass
class SolveResult:
    converged: bool
    iterations: int
    initial_error: float
    error: float
    values: dict = field(repr=False)
    reason: str = ""
    # True when the solve broke down (non-finite values or lambda ceiling);
    # a max_iter stop is not converged but its iterate is still an improvement.
    diverged: bool = False


def elimination_order(keys) -> list[Key]:
    """Time-major order (state, wrench, rotor within a step); keeps chains banded."""
    rank = {k: r for r, k in enumerate(KINDS)}
    return sorted(keys, key=lambda k: (k.index, rank.get(k.kind, len(KINDS)), k.kind))


@lru_cache(maxsize=256)
def _strict_lower(shape: tuple) -> tuple:
    return np.tril_indices(shape[0], -1, shape[1])


class _Linearized:
    """Whitened Jacobian row blocks of every factor, laid out in elimination order.

    Columns are grouped into blocks of variables sharing a time index; the
    QR sweep eliminates one block at a time.
    """

    def __init__(self, graph: FactorGraph, values: dict):
        order = elimination_order(values)
        self.order = order
        dims = [values[k].dim for k in order]
        self.cols = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        col_of = {k: (self.cols[n], self.cols[n + 1]) for n, k in enumerate(order)}
        # block boundaries: a new block starts whenever the time index changes
        starts = [n for n, k in enumerate(order) if n == 0 or k.index != order[n - 1].index]
        self.blocks = [self.cols[n] for n in starts] + [self.cols[-1]]
        block_of_col = np.zeros(self.cols[-1] + 1, dtype=int)
        for bi in range(len(starts)):
            block_of_col[self.blocks[bi]:self.blocks[bi + 1]] = bi
        self.buckets: list[list] = [[] for _ in starts]
        self.stacks = []  # (first columns, width, rows) per group, for the model cost
        self._static = None
        self.bsq = 0.0
        for fs in graph.groups():
            E, Js = type(fs[0]).linearize_many(fs, [[values[k] for k in f.keys] for f in fs])
            _check_finite(fs, E, Js)
            noise = fs[0].noise
            B = -noise.whiten_many(E)
            Js = [noise.whiten_jacobian_many(J) for J in Js]
            self.bsq += float(np.einsum("ij,ij->", B, B))
            spans = [[col_of[k] for k in f.keys] for f in fs]
            c0s = [min(s for s, _ in sp) for sp in spans]
            layouts = [tuple((s - c0, e - c0) for s, e in sp) + (max(e for _, e in sp) - c0,)
                       for sp, c0 in zip(spans, c0s)]
            if all(lay == layouts[0] for lay in layouts):
                parts = [(np.arange(len(fs)), layouts[0])]
            else:
                parts = [(np.array([n]), lay) for n, lay in enumerate(layouts)]
            for idx, lay in parts:
                width = lay[-1]
                A = np.zeros((len(idx), fs[0].dim, width + 1))
                for (s, e), J in zip(lay[:-1], Js):
                    A[:, :, s:e] += J[idx]
                A[:, :, -1] = B[idx]
                starts_ = np.array([c0s[n] for n in idx])
                self.stacks.append((starts_, width, A))
                for m, c0 in enumerate(starts_):
                    self.buckets[block_of_col[c0]].append((c0, c0 + width, A[m]))

    def _assemble_blocks(self) -> None:
        # Stack each block's own factor rows once; damping retries reuse them.
        self._static = []
        for bi, items in enumerate(self.buckets):
            c0 = self.blocks[bi]
            end = max([self.blocks[bi + 1]] + [it[1] for it in items])
            rows = sum(it[2].shape[0] for it in items)
            S = np.zeros((rows, end - c0 + 1))
            r = 0
            for s, e, A in items:
                m = A.shape[0]
                S[r:r + m, s - c0:e - c0] = A[:, :-1]
                S[r:r + m, -1] = A[:, -1]
                r += m
            self._static.append((end, S))

    def solve(self, damping: np.ndarray) -> tuple[np.ndarray, float] | None:
        """Minimise ``|J d - b|^2 + |sqrt(damping) d|^2`` by sequential QR.

        Returns the step and the undamped linear-model cost ``|J d - b|^2``,
        or ``None`` when a pivot vanishes.
        """
        if self._static is None:
            self._assemble_blocks()
        blocks = self.blocks
        sqrt_damp = np.sqrt(damping)
        cond = []
        carry = None  # (first column, end column, rows) passed to the next block
        for bi, (s_end, S) in enumerate(self._static):
            c0, c1v = blocks[bi], blocks[bi + 1]
            d = c1v - c0
            end = s_end if carry is None else max(s_end, carry[1])
            ns = S.shape[0]
            nc = 0 if carry is None else carry[2].shape[0]
            nrows = ns + nc + d
            M = np.zeros((nrows, end - c0 + 1))
            M[:ns, :s_end - c0] = S[:, :-1]
            M[:ns, -1] = S[:, -1]
            if nc:
                cs, ce, C = carry
                M[ns:ns + nc, cs - c0:ce - c0] = C[:, :-1]
                M[ns:ns + nc, -1] = C[:, -1]
            M[ns + nc:, :d].flat[::d + 1] = sqrt_damp[c0:c1v]
            qr, _, _, info = _geqrf(M, overwrite_a=True)
            if info != 0:
                return None
            # zero pivots surface in the triangular solves, NaNs in the final check
            cond.append((c0, c1v, end, qr[:d]))
            k = min(nrows, qr.shape[1])
            rest = qr[d:k, d:].copy()
            # clear the Householder vectors stored below the diagonal
            rest[_strict_lower(rest.shape)] = 0.0
            carry = (c1v, end, rest) if rest.shape[0] else None
        delta = np.zeros(self.cols[-1])
        for c0, c1v, end, Rv in reversed(cond):
            d = c1v - c0
            rhs = Rv[:, -1] - Rv[:, d:-1] @ delta[c1v:end]
            x, info = _trtrs(Rv[:, :d], rhs)
            if info != 0:
                return None
            delta[c0:c1v] = x
        if not np.isfinite(delta).all():
            return None
        lin = 0.0
        for starts, width, A in self.stacks:
            seg = delta[starts[:, None] + np.arange(width)]
            res = A[:, :, -1] - np.einsum("ndw,nw->nd", A[:, :, :-1], seg)
            lin += float(np.einsum("nd,nd->", res, res))
        return delta, lin

    def retract(self, values: dict, delta: np.ndarray) -> dict:
        cols = self.cols
        by_type: dict = {}
        for p, k in enumerate(self.order):
            by_type.setdefault(type(values[k]), []).append(p)
        out = {}
        for tp, ps in by_type.items():
            keys = [self.order[p] for p in ps]
            many = getattr(tp, "retract_many", None)
            dims = {cols[p + 1] - cols[p] for p in ps}
            if many is not None and len(dims) == 1:
                d = dims.pop()
                idx = np.array([cols[p] for p in ps])[:, None] + np.arange(d)
                out.update(zip(keys, many([values[k] for k in keys], delta[idx])))
            else:
                out.update((k, values[k].retract(delta[cols[p]:cols[p + 1]])) for k, p in zip(keys, ps))
        return out


def solve_lm(graph: FactorGraph, config: LMConfig | None = None) -> SolveResult:
    """Levenberg-Marquardt with isotropic damping ``lambda * I``.

    Each damped step is solved by QR elimination of the whitened Jacobian in
    time order, never through the normal equations: the tight dynamics and
    pin factors make ``J^T J`` too ill-conditioned for Cholesky.

    Accepted steps never increase the error. Stops when the error decrease
    falls below ``abs_tol`` or ``rel_tol`` relative, when no damped step can
    make predicted progress, at ``max_iter``, or when lambda exceeds its ceiling.
    """
    cfg = config or LMConfig()
    if not graph.values or not graph.factors:
        raise ValueError("graph needs at least one variable and one factor")
    values = dict(graph.values)
    try:
        err = graph.error(values)
    except FloatingPointError as exc:
        return SolveResult(False, 0, math.nan, math.nan, values, str(exc), diverged=True)
    err0 = err
    lam = cfg.lambda_init
    if not math.isfinite(err):
        return SolveResult(False, 0, err0, err, values, "non-finite initial error", diverged=True)

    for it in range(1, cfg.max_iter + 1):
        try:
            lin = _Linearized(graph, values)
        except FloatingPointError as exc:
            return SolveResult(False, it, err0, err, values, str(exc), diverged=True)
        D = np.ones(lin.cols[-1])
        while True:
            sol = lin.solve(lam * D)
            if sol is not None:
                delta, lin_cost = sol
                predicted = lin.bsq - lin_cost
                if predicted <= cfg.abs_tol + cfg.rel_tol * err:
                    return SolveResult(True, it, err0, err, values, "no predicted decrease")
                trial = lin.retract(values, delta)
                try:
                    new_err = graph.error(trial)
                except FloatingPointError:
                    new_err = math.inf
                if math.isfinite(new_err) and new_err <= err:
                    decrease = err - new_err
                    values, err = trial, new_err
                    # gain ratio: actual over predicted decrease
                    rho = decrease / predicted
                    lam = max(lam * max(1.0 / cfg.lambda_scale, 1.0 - (2.0 * rho - 1.0) ** 3),
                              cfg.lambda_min)
                    if err < cfg.abs_tol:
                        return SolveResult(True, it, err0, err, values, "error below abs_tol")
                    if decrease < cfg.abs_tol or decrease < cfg.rel_tol * (err + decrease):
                        return SolveResult(True, it, err0, err, values, "error change below tolerance")
                    break
            lam *= cfg.lambda_scale
            if lam > cfg.lambda_max:
                log.debug("LM diverged at iteration %d (lambda %.3g)", it, lam)
                return SolveResult(False, it, err0, err, values, "lambda exceeded ceiling",
                                   diverged=True)
    return SolveResult(False, cfg.max_iter, err0, err, values, "max_iter reached")
