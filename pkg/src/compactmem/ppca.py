"""Memory updates by Hessian matching.

The new memory is fitted so that ``U W~ U^T + eps I`` matches the curvature of
the new task plus the old memory.  The fit is maximum likelihood in a
probabilistic-PCA model with fixed noise ``eps`` and is computed by EM on the
scaled vectors ``U~ = U diag(w)^{1/2}``.  An exact eigendecomposition baseline
is provided for the linear family.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.optimize import nnls

from .glm import DEFAULT_CLIP, Family, as_family, curvature
from .kprior import Memory

log = logging.getLogger(__name__)


INIT_SCALES = ("raw", "trace", "fit")


class EMError(RuntimeError):
    """The K x K system of an EM step could not be factorized."""


@dataclass
class PpcaConfig:
    epsilon: float = 1e-4
    em_iters: int = 100
    new_vectors_per_task: int = 0
    init_strategy: str = "random-feature-columns"
    init_scale: str = "fit"
    weight_floor: float = 1e-10
    tol: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.weight_floor > 0:
            raise ValueError("weight_floor must be positive")
        if self.init_strategy != "random-feature-columns":
            raise ValueError(f"unknown init_strategy {self.init_strategy!r}")
        if self.init_scale not in INIT_SCALES:
            raise ValueError(f"init_scale must be one of {INIT_SCALES}, got {self.init_scale!r}")


@dataclass
class StackedTargets:
    """Stacked target columns ``T`` and their Gram matrix ``S = T T^T``."""

    T: np.ndarray
    S: np.ndarray


def _stack(T: np.ndarray) -> StackedTargets:
    S = T @ T.T
    return StackedTargets(T, 0.5 * (S + S.T))


def build_targets_linear(phi, mem: Memory) -> StackedTargets:
    phi = np.asarray(phi, dtype=np.float64)
    if mem.K and phi.shape[0] != mem.P:
        raise ValueError(f"features have P={phi.shape[0]}, memory has P={mem.P}")
    return _stack(np.hstack([phi, mem.scaled]))


def build_targets_logistic(family, phi, mem: Memory, theta_next, clip: float = DEFAULT_CLIP) -> StackedTargets:
    """Curvature-weighted targets at the new solution ``theta_next``.

    ``S`` equals the data Hessian of the new task plus the Hessian of the old
    memory's function-space term (summed class-diagonal blocks for
    multiclass), without any ``delta I`` terms.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if mem.K and phi.shape[0] != mem.P:
        raise ValueError(f"features have P={phi.shape[0]}, memory has P={mem.P}")
    lam_data = curvature(family, theta_next, phi, clip)
    lam_mem = curvature(family, theta_next, mem.U, clip) if mem.K else np.zeros(0)
    T = np.hstack([phi * np.sqrt(lam_data), mem.U * np.sqrt(mem.w * lam_mem)])
    return _stack(T)


def _spd_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive definite ``A``, with one jitter retry."""
    A = 0.5 * (A + A.T)
    try:
        return sla.cho_solve(sla.cho_factor(A), B)
    except np.linalg.LinAlgError:
        k = A.shape[0]
        jitter = 1e-12 * max(np.trace(A) / k, np.finfo(float).tiny)
        try:
            return sla.cho_solve(sla.cho_factor(A + jitter * np.eye(k)), B)
        except np.linalg.LinAlgError as exc:
            raise EMError(f"K x K system singular even after jitter {jitter:.3g}") from exc


def em_update(S, U_tilde, epsilon: float) -> np.ndarray:
    """One EM step ``S U (eps I + M^-1 U^T S U)^-1`` with ``M = U^T U + eps I``.

    Rewritten as ``S U (eps M + U^T S U)^-1 M`` so the solve is symmetric
    positive definite.
    """
    U = np.asarray(U_tilde, dtype=np.float64)
    k = U.shape[1]
    if k == 0:
        return U.copy()
    if k > U.shape[0]:
        raise ValueError(f"K={k} exceeds P={U.shape[0]}")
    SU = S @ U
    M = U.T @ U + epsilon * np.eye(k)
    A = epsilon * M + U.T @ SU
    # X = SU A^-1 M  <=>  X^T = M A^-1 SU^T  (A, M symmetric)
    return (M @ _spd_solve(A, SU.T)).T


def log_likelihood(S, U_tilde, epsilon: float, n: float = 1.0) -> float:
    """PPCA log marginal likelihood up to a constant.

    ``-n/2 [log|C| + tr(C^-1 S)]`` with ``C = U U^T + eps I``; ``S`` plays the
    role of the per-sample scatter ``T T^T / n``.
    """
    U = np.asarray(U_tilde, dtype=np.float64)
    C = U @ U.T + epsilon * np.eye(U.shape[0])
    cf = sla.cho_factor(C)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return -0.5 * n * (logdet + np.trace(sla.cho_solve(cf, S)))


def run_em(S, U_tilde, epsilon: float, iters: int, tol: float | None = None) -> np.ndarray:
    U = np.asarray(U_tilde, dtype=np.float64)
    for it in range(iters):
        U_new = em_update(S, U, epsilon)
        if tol is not None:
            change = np.linalg.norm(U_new - U) / max(np.linalg.norm(U), np.finfo(float).tiny)
            U = U_new
            if change < tol:
                log.debug("EM converged after %d iterations", it + 1)
                break
        else:
            U = U_new
    return U


def _new_columns(phi: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``count`` distinct non-zero columns of ``phi``."""
    if count <= 0 or phi.shape[1] == 0:
        return np.zeros((phi.shape[0], 0))
    nonzero = np.flatnonzero(np.linalg.norm(phi, axis=0) > 0)
    count = min(count, nonzero.size)
    # a permutation prefix, so larger counts extend smaller ones
    idx = rng.permutation(nonzero)[:count]
    return phi[:, np.sort(idx)]


def _grow(phi, mem: Memory, cfg: PpcaConfig, rng, S: np.ndarray, curv=None) -> Memory:
    """Append new unit vectors drawn from the columns of ``phi``.

    EM with a small ``eps`` aligns the memory with the leading eigenspace of
    ``S`` quickly but changes the weights within that space only at a rate
    of order ``eps / eigenvalue`` per step, so the initial weights largely
    survive.  ``cfg.init_scale`` sets them:

    ``"raw"``
        weight ``||phi_n||^2``, i.e. the scaled vector is the raw column;
    ``"trace"``
        raw weights times one common factor so the new scaled vectors carry
        the task's share of the target trace, ``sum_n lambda_n ||phi_n||^2``;
    ``"fit"``
        non-negative least squares for the new weights against the part of
        the Hessian-matching target not explained by the old memory,
        ``|| sum_k c_k a_k a_k^T - (S - U_old W~ U_old^T - eps I) ||_F``.

    ``curv`` maps feature columns to curvatures (logistic models).  Weights
    are then set so that ``w lambda(u)`` plays the role of the linear weight,
    starting each new vector at ``sqrt(lambda(phi_n)) phi_n``.
    """
    cap = phi.shape[0] - mem.K
    new = _new_columns(phi, min(cfg.new_vectors_per_task, cap), rng)
    if new.shape[1] == 0:
        return mem
    w_new = np.sum(new * new, axis=0)
    U_new = new / np.sqrt(w_new)
    ones = lambda cols: np.ones(cols.shape[1])  # noqa: E731
    curv = ones if curv is None else curv
    if cfg.init_scale != "raw":
        lam_u = curv(U_new)
        w_new = w_new * curv(new) / lam_u
        if cfg.init_scale == "trace":
            target = np.sum(curv(phi) * np.sum(phi * phi, axis=0))
            w_new = w_new * (target / np.sum(w_new * lam_u))
        else:
            w_new = w_new * _fit_scales(U_new * np.sqrt(w_new * lam_u), mem, curv, S, cfg.epsilon)
    return Memory(np.hstack([mem.U, U_new]), np.concatenate([mem.w, w_new]))


def _fit_scales(A: np.ndarray, mem: Memory, curv, S: np.ndarray, epsilon: float) -> np.ndarray:
    """Non-negative ``c`` minimizing ``|| A diag(c) A^T - R ||_F`` (R = unexplained target)."""
    O = mem.U * np.sqrt(mem.w * curv(mem.U)) if mem.K else np.zeros((S.shape[0], 0))
    R = S - O @ O.T - epsilon * np.eye(S.shape[0])
    G = (A.T @ A) ** 2
    b = np.einsum("pk,pk->k", A, R @ A)
    k = b.size
    L = np.linalg.cholesky(G + 1e-12 * max(np.trace(G) / k, np.finfo(float).tiny) * np.eye(k))
    c, _ = nnls(L.T, sla.solve_triangular(L, b, lower=True))
    # directions the fit drops keep a tiny weight; EM may still use them
    return np.maximum(c, 1e-8)


def update_memory_linear(phi, mem: Memory, cfg: PpcaConfig, rng=None) -> Memory:
    """Hessian matching for linear regression.

    Appends up to ``cfg.new_vectors_per_task`` columns drawn from ``phi``
    (total K capped at P, initial scale per ``cfg.init_scale``), runs ``cfg.em_iters`` EM steps against
    ``phi phi^T + U W U^T`` built from the *old* memory, and splits the result
    back into unit vectors and weights.  Responses are left unset.
    """
    phi = np.asarray(phi, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    S = build_targets_linear(phi, mem).S
    grown = _grow(phi, mem, cfg, rng, S)
    U_tilde = run_em(S, grown.scaled, cfg.epsilon, cfg.em_iters, cfg.tol)
    return Memory.from_scaled(U_tilde, cfg.weight_floor)


def update_memory_logistic(family, phi, mem: Memory, theta_next, cfg: PpcaConfig, clip: float = DEFAULT_CLIP, rng=None) -> Memory:
    """Hessian matching for logistic models at the new solution ``theta_next``.

    The target Gram matrix is built once from curvatures at ``theta_next``.
    Each iteration re-weights the current memory by its own curvature, takes
    one EM step on the curvature-scaled vectors, removes the curvature again
    and re-extracts unit vectors and weights.
    """
    family = as_family(family)
    phi = np.asarray(phi, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    S = build_targets_logistic(family, phi, mem, theta_next, clip).S

    def curv(cols):
        lam = curvature(family, theta_next, cols, clip)
        if np.any(lam < 1e-12):
            raise EMError("memory curvature below 1e-12; cannot rescale by lambda^-1/2")
        return lam

    cur = _grow(phi, mem, cfg, rng, S, curv)
    for _ in range(cfg.em_iters):
        lam = curv(cur.U)
        U_tilde = cur.U * np.sqrt(cur.w * lam)
        U_tilde = em_update(S, U_tilde, cfg.epsilon) / np.sqrt(lam)
        cur = Memory.from_scaled(U_tilde, cfg.weight_floor)
    return Memory(cur.U, cur.w)


def update_memory_svd(phi, mem: Memory, new_size: int) -> Memory:
    """Exact truncated eigendecomposition of ``phi phi^T + U W U^T``.

    Keeps the top ``new_size`` eigenpairs with strictly positive eigenvalue.
    """
    S = build_targets_linear(phi, mem).S
    d, V = np.linalg.eigh(S)
    order = np.argsort(d)[::-1]
    d, V = d[order], V[:, order]
    thresh = max(d[0], 0.0) * S.shape[0] * np.finfo(float).eps if d.size else 0.0
    keep = min(int(new_size), int(np.sum(d > thresh)))
    return Memory(V[:, :keep], d[:keep])


# -- serialization ---------------------------------------------------------

_MAGIC = b"KMEM"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")  # magic, version, P, K, response rows


def save_memory(path, mem: Memory, meta: dict | None = None) -> Path:
    """Write ``mem`` to ``path`` plus a JSON sidecar ``path + '.json'``.

    Binary layout (little-endian): magic ``KMEM``, uint32 version, P, K, R,
    then float64 row-major ``U`` (P x K), ``w`` (K) and responses (R x K).
    R is 0 when responses are unset.
    """
    path = Path(path)
    R = 0 if mem.responses is None else mem.responses.shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, mem.P, mem.K, R))
        fh.write(np.ascontiguousarray(mem.U, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(mem.w, dtype="<f8").tobytes())
        if R:
            fh.write(np.ascontiguousarray(mem.responses, dtype="<f8").tobytes())
    sidecar = dict(meta or {})
    sidecar.update(P=mem.P, K=mem.K, response_rows=R)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))
    return path


def load_memory(path) -> tuple[Memory, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated memory file")
    magic, version, P, K, R = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a memory file (magic={magic!r}, version={version})")
    expected = _HEADER.size + 8 * (P * K + K + R * K)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    U = body[: P * K].reshape(P, K).astype(np.float64)
    w = body[P * K : P * K + K].astype(np.float64)
    responses = body[P * K + K :].reshape(R, K).astype(np.float64) if R else None
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Memory(U, w, responses), meta


__all__ = [
    "EMError",
    "PpcaConfig",
    "StackedTargets",
    "build_targets_linear",
    "build_targets_logistic",
    "em_update",
    "load_memory",
    "log_likelihood",
    "run_em",
    "save_memory",
    "update_memory_linear",
    "update_memory_logistic",
    "update_memory_svd",
]
