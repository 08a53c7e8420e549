"""K-prior regularizer, per-task training and the batch oracle."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .glm import Family, as_family, entropy, link, task_loss_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the training objective stops being finite."""


@dataclass
class Memory:
    """Unit-norm memory vectors ``U`` (P x K) with positive weights ``w`` (K,).

    ``responses`` caches the anchor's predictions on the memory vectors as an
    ``(R, K)`` array (R = 1 for single-output models, C otherwise).  It is
    ``None`` right after a memory update until :meth:`with_responses` is called.
    """

    U: np.ndarray
    w: np.ndarray
    responses: np.ndarray | None = None

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if self.U.ndim != 2 or self.U.shape[1] != self.w.shape[0]:
            raise ValueError(f"U {self.U.shape} and w {self.w.shape} disagree on K")
        if self.responses is not None:
            self.responses = np.atleast_2d(np.asarray(self.responses, dtype=np.float64))
            if self.responses.shape[1] != self.K:
                raise ValueError("responses must have one column per memory vector")

    @classmethod
    def empty(cls, dim: int) -> "Memory":
        return cls(np.zeros((dim, 0)), np.zeros(0))

    @classmethod
    def from_scaled(cls, U_tilde: np.ndarray, weight_floor: float = 1e-10) -> "Memory":
        """Split scaled vectors ``U diag(w)^{1/2}`` into unit directions and weights."""
        w = np.sum(U_tilde * U_tilde, axis=0)
        w = np.maximum(w, weight_floor)
        return cls(U_tilde / np.sqrt(w), w)

    @property
    def P(self) -> int:
        return self.U.shape[0]

    @property
    def K(self) -> int:
        return self.U.shape[1]

    @property
    def scaled(self) -> np.ndarray:
        return self.U * np.sqrt(self.w)

    def with_responses(self, family, anchor) -> "Memory":
        anchor = np.asarray(anchor, dtype=np.float64)
        r = link(family, anchor @ self.U)
        return Memory(self.U, self.w, np.atleast_2d(r))

    def check(self, tol: float = 1e-8) -> None:
        norms = np.linalg.norm(self.U, axis=0)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError(f"memory vectors are not unit norm (max dev {np.max(np.abs(norms - 1))})")
        if np.any(self.w <= 0):
            raise ValueError("memory weights must be positive")


@dataclass
class KPriorConfig:
    delta: float
    family: Family = Family.LINEAR
    soft_targets: bool = True

    def __post_init__(self):
        self.family = as_family(self.family)
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    iters: int = 1000
    batch_size: int | None = None
    epochs: int | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")

    def n_steps(self, n: int) -> int:
        """Optimizer steps for a task of ``n`` examples."""
        if self.epochs is None or self.batch_size is None or n == 0:
            return self.iters if self.epochs is None else self.epochs
        return self.epochs * -(-n // self.batch_size)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_params(family, dim: int, n_outputs: int | None = None) -> np.ndarray:
    """Zero parameters: a vector unless the model has several outputs."""
    family = as_family(family)
    if family is Family.MULTICLASS:
        if n_outputs is None or n_outputs < 2:
            raise ValueError("multiclass models need n_outputs >= 2")
        return np.zeros((n_outputs, dim))
    if n_outputs is None or (family is Family.BINARY and n_outputs == 1):
        return np.zeros(dim)
    if family is Family.BINARY:
        raise ValueError("binary logistic models have a single output")
    return np.zeros((n_outputs, dim))


def _memory_targets(family, anchor, mem: Memory, soft_targets: bool) -> np.ndarray:
    if soft_targets and mem.responses is not None:
        return mem.responses
    return np.atleast_2d(link(family, anchor @ mem.U))


def kprior_value_grad(family, theta, anchor, mem: Memory, delta: float, soft_targets: bool = True):
    """Value and gradient of the K-prior centred at ``anchor``.

    ``0.5 * delta * ||theta - anchor||^2 + sum_k w_k L(r_k, yhat(u_k . theta))``
    where ``r_k`` are the anchor's predictions on the memory.  For logistic
    families ``L`` is the soft-target cross-entropy minus the entropy of
    ``r_k`` (a KL divergence), so value and gradient vanish at the anchor.
    """
    family = as_family(family)
    theta = np.asarray(theta, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if theta.shape != anchor.shape:
        raise ValueError(f"theta {theta.shape} and anchor {anchor.shape} differ in shape")
    if mem.K and mem.P != theta.shape[-1]:
        raise ValueError(f"memory has P={mem.P}, params have P={theta.shape[-1]}")

    diff = theta - anchor
    value = 0.5 * delta * float(np.sum(diff * diff))
    grad = delta * diff
    if mem.K == 0:
        return value, grad

    R = _memory_targets(family, anchor, mem, soft_targets)
    F = theta @ mem.U
    vector = theta.ndim == 1
    r = R[0] if vector else R

    if family is Family.LINEAR:
        resid = F - r
        value += 0.5 * float(np.sum(mem.w * resid * resid))
        grad = grad + (resid * mem.w) @ mem.U.T
    elif family is Family.BINARY:
        # softplus(f) - r f - H(r)
        ce = -(r * log_expit(F) + (1.0 - r) * log_expit(-F))
        value += float(np.sum(mem.w * (ce - entropy(family, r))))
        grad = grad + mem.U @ (mem.w * (expit(F) - r))
    else:
        ce = logsumexp(F, axis=0) - np.sum(r * F, axis=0)
        value += float(np.sum(mem.w * (ce - entropy(family, r))))
        grad = grad + ((softmax(F, axis=0) - r) * mem.w) @ mem.U.T
    return value, grad


def objective(family, theta, anchor, mem, phi, y, delta, soft_targets=True):
    """Task loss plus K-prior, the quantity minimized by :func:`train_task`."""
    lv, lg = task_loss_grad(family, theta, phi, y)
    kv, kg = kprior_value_grad(family, theta, anchor, mem, delta, soft_targets)
    return lv + kv, lg + kg


def _take(y, idx):
    y = np.asarray(y)
    return y[..., idx]


def train_task(
    family,
    anchor,
    mem: Memory,
    phi,
    y,
    delta: float,
    tcfg: TrainConfig,
    init=None,
    soft_targets: bool = True,
) -> np.ndarray:
    """Minimize task loss + K-prior with Adam, starting from ``init`` (default the anchor).

    Full-batch by default.  With ``tcfg.batch_size`` set, the task loss is
    estimated on shuffled mini-batches rescaled to the full task size; the
    K-prior is always evaluated in full.
    """
    family = as_family(family)
    anchor = np.asarray(anchor, dtype=np.float64)
    theta = anchor.copy() if init is None else np.array(init, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[1]
    steps = tcfg.n_steps(n)
    opt = Adam(tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)

    minibatch = tcfg.batch_size is not None and tcfg.batch_size < n
    rng = np.random.default_rng(tcfg.seed)
    order = np.arange(n)
    pos = n

    for it in range(steps):
        if minibatch:
            if pos + tcfg.batch_size > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos : pos + tcfg.batch_size]
            pos += tcfg.batch_size
            lv, lg = task_loss_grad(family, theta, phi[:, idx], _take(y, idx))
            scale = n / idx.size
            lv, lg = lv * scale, lg * scale
        else:
            lv, lg = task_loss_grad(family, theta, phi, y)
        kv, kg = kprior_value_grad(family, theta, anchor, mem, delta, soft_targets)
        value = lv + kv
        if not np.isfinite(value) or not np.all(np.isfinite(lg)):
            raise TrainingError(f"non-finite objective {value!r} at iteration {it}")
        theta = opt.step(theta, lg + kg)
    log.debug("trained %d steps on %d examples, K=%d", steps, n, mem.K)
    return theta


def batch_train(family, tasks, delta: float, tcfg: TrainConfig, n_outputs: int | None = None) -> np.ndarray:
    """Joint training on the concatenation of ``tasks`` (pairs of ``(phi, y)``).

    Regularized by ``0.5 * delta * ||theta||^2``; this is the oracle that
    continual methods try to match.
    """
    family = as_family(family)
    phis, ys = zip(*tasks)
    phi = np.concatenate(phis, axis=1)
    y = np.concatenate([np.asarray(t) for t in ys], axis=-1)
    if n_outputs is None and family is Family.LINEAR and y.ndim == 2:
        n_outputs = y.shape[0]
    theta0 = init_params(family, phi.shape[0], n_outputs)
    return train_task(family, theta0, Memory.empty(phi.shape[0]), phi, y, delta, tcfg)


__all__ = [
    "Adam",
    "KPriorConfig",
    "Memory",
    "TrainConfig",
    "TrainingError",
    "batch_train",
    "init_params",
    "kprior_value_grad",
    "objective",
    "train_task",
]
