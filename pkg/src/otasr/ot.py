"""Cross-modal sequence alignment via entropy-regularized optimal transport.

Pipeline: cosine cost between a text-side feature sequence Z (T_t x d) and an
acoustic-side sequence H (T_a x d), a log-domain Sinkhorn solver for the
entropy-regularized coupling, projection of H into text positions through the
coupling, and the interior-row alignment loss.

The solver is deliberately *outside* the autodiff graph: the coupling is a
constant during backpropagation, and gradients reach the encoder only through
the cost matrix (in the transport term) and through H (in the projection).
Differentiating through Sinkhorn iterations is a non-goal.

Two interchangeable solver kernels exist: a compiled Cython loop and a pure
numpy fallback, selected at import (override with OTASR_SINKHORN_BACKEND=c|py).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

try:
    from . import _sinkhorn as _ckernel
except ImportError:  # extension not built; numpy path is fully equivalent
    _ckernel = None

_env = os.environ.get("OTASR_SINKHORN_BACKEND", "").strip().lower()
if _env == "c":
    if _ckernel is None:
        raise ImportError(
            "OTASR_SINKHORN_BACKEND=c but the compiled kernel is not available"
        )
    _BACKEND = "c"
elif _env == "py":
    _BACKEND = "py"
elif _env == "":
    _BACKEND = "c" if _ckernel is not None else "py"
else:
    raise ValueError(f"OTASR_SINKHORN_BACKEND must be 'c' or 'py', got {_env!r}")

# Instrumentation: bumped on every solver call so inference paths can prove
# they never ran a single Sinkhorn solve.
SINKHORN_CALLS = 0


def backend() -> str:
    """Name of the active solver kernel: 'c' (compiled) or 'py' (numpy)."""
    return _BACKEND


@dataclass
class Coupling:
    """Transport plan with the marginals it was solved against."""

    gamma: np.ndarray  # T_t x T_a, strictly positive after convergence
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def marginal_violation(self) -> float:
        """Max absolute row/column-sum deviation from the target marginals."""
        row = np.abs(self.gamma.sum(axis=1) - self.row_marginal).max()
        col = np.abs(self.gamma.sum(axis=0) - self.col_marginal).max()
        return float(max(row, col))


@dataclass
class EotResult:
    coupling: Coupling
    transport_cost: float
    entropy: float
    eot_loss: float  # == transport_cost - alpha * entropy, exactly
    iterations_used: int
    converged: bool
    alpha: float


def uniform_marginals(n_rows: int, n_cols: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(n_rows, 1.0 / n_rows), np.full(n_cols, 1.0 / n_cols)


def entropy(gamma: np.ndarray) -> float:
    """H(gamma) = -sum gamma * (log gamma - 1), with 0*log 0 := 0."""
    g = np.asarray(gamma, dtype=np.float64)
    pos = g > 0.0
    terms = np.zeros_like(g)
    terms[pos] = g[pos] * (np.log(g[pos]) - 1.0)
    return float(-terms.sum())


def _solve_py(logK, loga, logb, tol, max_iter):
    """Log-domain Sinkhorn sweeps; returns (u, v, iterations, converged)."""
    u = np.zeros_like(loga)
    v = np.zeros_like(logb)
    iters = 0
    converged = False
    while iters < max_iter:
        kv = logK + v[None, :]
        m = kv.max(axis=1)
        u = loga - (m + np.log(np.exp(kv - m[:, None]).sum(axis=1)))
        ku = logK + u[:, None]
        m = ku.max(axis=0)
        v = logb - (m + np.log(np.exp(ku - m[None, :]).sum(axis=0)))
        iters += 1
        gamma = np.exp(u[:, None] + logK + v[None, :])
        viol = max(
            np.abs(gamma.sum(axis=1) - np.exp(loga)).max(),
            np.abs(gamma.sum(axis=0) - np.exp(logb)).max(),
        )
        if viol <= tol:
            converged = True
            break
    return u, v, iters, converged


def sinkhorn(
    C,
    alpha: float,
    marginals: tuple[np.ndarray, np.ndarray] | None = None,
    max_iter: int = 1000,
    tol: float = 1e-6,
) -> EotResult:
    """Solve the entropy-regularized transport problem for cost matrix C.

    C may be a raw array or a graph node; only its value is consumed — the
    result is a constant with respect to any surrounding computation graph.
    Marginals default to uniform. `converged=False` is returned (not raised)
    when the iteration budget runs out; the caller decides what that means.
    """
    global SINKHORN_CALLS
    cost = C.value if isinstance(C, ad.Node) else np.asarray(C, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"sinkhorn: cost must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("sinkhorn: cost contains non-finite entries")
    if not alpha > 0.0:
        raise ValueError(f"sinkhorn: alpha must be positive, got {alpha}")
    if not tol > 0.0:
        raise ValueError(f"sinkhorn: tol must be positive, got {tol}")
    n, m = cost.shape
    if marginals is None:
        marginals = uniform_marginals(n, m)
    a = np.asarray(marginals[0], dtype=np.float64)
    b = np.asarray(marginals[1], dtype=np.float64)
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError(
            f"sinkhorn: marginals of lengths {a.shape[0]}/{b.shape[0]} "
            f"do not match cost shape {n}x{m}"
        )
    if (a <= 0.0).any() or (b <= 0.0).any():
        raise ValueError("sinkhorn: marginals must be strictly positive")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError("sinkhorn: marginals must each sum to 1")

    SINKHORN_CALLS += 1
    logK = np.ascontiguousarray(-cost / alpha)
    loga = np.log(a)
    logb = np.log(b)
    if _BACKEND == "c":
        u, v, iters, converged = _ckernel.solve(logK, loga, logb, tol, int(max_iter))
        converged = bool(converged)
    else:
        u, v, iters, converged = _solve_py(logK, loga, logb, tol, int(max_iter))

    gamma = np.exp(u[:, None] + logK + v[None, :])
    transport = float((gamma * cost).sum())
    ent = entropy(gamma)
    result = EotResult(
        coupling=Coupling(gamma=gamma, row_marginal=a, col_marginal=b),
        transport_cost=transport,
        entropy=ent,
        eot_loss=transport - alpha * ent,
        iterations_used=int(iters),
        converged=converged,
        alpha=float(alpha),
    )
    return result


def _check_nonzero_rows(value: np.ndarray, label: str) -> None:
    norms = np.sqrt((value * value).sum(axis=1))
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ValueError(
            f"cosine_cost: {label} row {int(zero[0])} has zero norm; cosine undefined"
        )


def cosine_cost(Z: ad.Node, H: ad.Node) -> ad.Node:
    """C[i, j] = 1 - cos(z_i, h_j), differentiable w.r.t. both inputs."""
    if Z.value.shape[1] != H.value.shape[1]:
        raise ad.ShapeError("cosine_cost", Z.value.shape, H.value.shape)
    _check_nonzero_rows(Z.value, "Z")
    _check_nonzero_rows(H.value, "H")
    dots = ad.matmul(Z, ad.transpose(H))  # T_t x T_a
    inv_z = ad.reciprocal(ad.sqrt(ad.sum_rows(ad.mul(Z, Z))))  # T_t x 1
    inv_h = ad.reciprocal(ad.sqrt(ad.sum_rows(ad.mul(H, H))))  # T_a x 1
    cos = ad.mul(dots, ad.matmul(inv_z, ad.transpose(inv_h)))
    return ad.offset(ad.scale(cos, -1.0), 1.0)


def project(coupling: Coupling, H: ad.Node) -> ad.Node:
    """Transport H into text positions: gamma @ H, gamma held constant."""
    gamma = coupling.gamma
    if gamma.shape[1] != H.value.shape[0]:
        raise ad.ShapeError("project", gamma.shape, H.value.shape)
    return ad.matmul(ad.constant(gamma, name="coupling"), H)


def alignment_loss(Z: ad.Node, Z_tilde: ad.Node) -> ad.Node:
    """Sum of (1 - cos) over interior rows, excluding the first and last.

    The first and last rows carry sequence-delimiter embeddings, not content,
    so they are excluded by construction.
    """
    if Z.value.shape != Z_tilde.value.shape:
        raise ad.ShapeError("alignment_loss", Z.value.shape, Z_tilde.value.shape)
    t_t = Z.value.shape[0]
    if t_t < 3:
        raise ValueError(
            f"alignment_loss: need at least 3 rows (got {t_t}); "
            "no interior positions to compare"
        )
    zi = ad.row_slice(Z, 1, t_t - 1)
    zt = ad.row_slice(Z_tilde, 1, t_t - 1)
    _check_nonzero_rows(zi.value, "Z interior")
    _check_nonzero_rows(zt.value, "Z_tilde interior")
    dots = ad.sum_rows(ad.mul(zi, zt))
    inv_a = ad.reciprocal(ad.sqrt(ad.sum_rows(ad.mul(zi, zi))))
    inv_b = ad.reciprocal(ad.sqrt(ad.sum_rows(ad.mul(zt, zt))))
    cos = ad.mul(ad.mul(dots, inv_a), inv_b)
    return ad.reduce_sum(ad.offset(ad.scale(cos, -1.0), 1.0))
