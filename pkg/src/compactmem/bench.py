"""Continual-learning runs: the compact-memory method and its baselines.

Every runner walks a :class:`~compactmem.tasks.TaskStream` task by task and
returns a :class:`RunRecord`.  Per-task test accuracies are measured once,
after the final task.

Methods
-------
``ours-ppca``
    K-prior with memory fitted by Hessian matching (EM).
``svd``
    K-prior with memory from a truncated eigendecomposition (linear only).
``kprior-random``
    K-prior whose memory is a random subset of past feature vectors.
``replay``
    Current loss plus the summed loss on stored past examples.
``weight-reg``
    Quadratic pull towards the previous parameters only.
``batch``
    Joint training on all tasks; the reference the others try to match.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .glm import Family, accuracy, poly_features
from .kprior import Memory, TrainConfig, TrainingError, batch_train, init_params, train_task
from .ppca import (
    EMError,
    PpcaConfig,
    save_memory,
    update_memory_linear,
    update_memory_logistic,
    update_memory_svd,
)
from .tasks import TaskStream, four_moon_grid

log = logging.getLogger(__name__)

METHODS = ("ours-ppca", "svd", "kprior-random", "replay", "weight-reg", "batch")


# -- budgets -------------------------------------------------------------------


@dataclass(frozen=True)
class Budget:
    """Memory budget: a fraction of the data seen so far or a count per task.

    ``Budget.parse("1%")`` keeps ``floor(0.01 * n_seen)`` items after each
    task; ``Budget.parse(14)`` adds 14 items per task.  Fractions are exact
    rationals so ``"29%"`` of 100 is 29, not 28.
    """

    kind: str
    value: Fraction

    @classmethod
    def parse(cls, spec) -> "Budget":
        if isinstance(spec, Budget):
            return spec
        if isinstance(spec, bool):
            raise ValueError(f"invalid budget {spec!r}")
        if isinstance(spec, int):
            if spec < 0:
                raise ValueError(f"budget must be non-negative, got {spec}")
            return cls("per_task", Fraction(spec))
        if isinstance(spec, str):
            text = spec.strip()
            if text.endswith("%"):
                try:
                    pct = Fraction(text[:-1].strip())
                except ValueError:
                    raise ValueError(f"invalid budget {spec!r}") from None
                if not 0 <= pct <= 100:
                    raise ValueError(f"percentage budget must lie in [0, 100], got {spec!r}")
                return cls("fraction", pct / 100)
            if text.isdigit():
                return cls("per_task", Fraction(int(text)))
        raise ValueError(f"invalid budget {spec!r}: use an integer per task or a string like '1%'")

    @property
    def label(self) -> str:
        if self.kind == "per_task":
            return str(int(self.value))
        pct = self.value * 100
        return f"{pct.numerator}%" if pct.denominator == 1 else f"{float(pct):g}%"

    def size(self, tasks_seen: int, n_seen: int) -> int:
        """Total number of stored items allowed after ``tasks_seen`` tasks."""
        if self.kind == "per_task":
            return int(self.value) * tasks_seen
        return math.floor(self.value * n_seen)


# -- records -----------------------------------------------------------------


@dataclass
class RunRecord:
    method: str
    stream: str
    budget: str
    seed: int
    per_task_acc: list
    avg_acc: float
    wall_clock_s: float
    memory_sizes: list = field(default_factory=list)
    hyperparams: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    error: str | None = None
    params: np.ndarray | None = field(default=None, repr=False, compare=False)
    memory: Memory | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("params", "memory")}
        return json.loads(json.dumps(d, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _record(method, stream, budget, seed, accs, t0, **kw) -> RunRecord:
    accs = [float(a) for a in accs]
    return RunRecord(method, stream.name, budget.label if budget else "-", seed, accs,
                     float(np.mean(accs)), time.perf_counter() - t0, **kw)


# -- evaluation ----------------------------------------------------------------


def evaluate(stream: TaskStream, theta) -> list[float]:
    """Test accuracy of ``theta`` on every task of the stream."""
    return [accuracy(stream.family, theta, t.phi_test, t.labels_test) for t in stream.tasks]


def grid_agreement(theta_a, theta_b, degree: int = 5) -> float:
    """Fraction of the four-moon grid on which two binary classifiers agree."""
    X, _ = four_moon_grid()
    G = poly_features(X, degree)
    return float(np.mean((np.asarray(theta_a) @ G > 0) == (np.asarray(theta_b) @ G > 0)))


# -- example stores --------------------------------------------------------------


class ExampleStore:
    """Stored training examples of past tasks, as indices into each task.

    After each task the store is redrawn so that every seen task gets an
    equal share of the budget.  Shares a task cannot fill (an old task can
    only keep what it already stored) spill over to the others.  The newest
    task is sampled from all its data.
    """

    def __init__(self):
        self.indices: dict[int, np.ndarray] = {}

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.indices.values()))

    def refresh(self, task_id: int, n_new: int, total: int, rng: np.random.Generator) -> None:
        pools = dict(self.indices)
        pools[task_id] = np.arange(n_new)
        alloc = _equal_allocation({k: v.size for k, v in pools.items()}, total)
        self.indices = {
            k: np.sort(rng.choice(pools[k], size=alloc[k], replace=False)) if alloc[k] < pools[k].size else pools[k]
            for k in sorted(pools)
        }

    def gather(self, stream: TaskStream):
        """Stacked features and raw labels of all stored examples."""
        phis, labels = [], []
        for k, idx in self.indices.items():
            t = stream.tasks[k]
            phis.append(t.phi_train[:, idx])
            labels.append(t.labels_train[idx])
        if not phis:
            return np.zeros((stream.dim, 0)), np.zeros(0, dtype=np.int64)
        return np.hstack(phis), np.concatenate(labels)


def _equal_allocation(capacity: dict, total: int) -> dict:
    """Split ``total`` as evenly as possible subject to per-key capacities."""
    alloc = {k: 0 for k in capacity}
    remaining = min(total, sum(capacity.values()))
    open_keys = sorted(k for k in capacity if capacity[k] > 0)
    while remaining > 0 and open_keys:
        share, extra = divmod(remaining, len(open_keys))
        progressed = 0
        for i, k in enumerate(open_keys):
            give = min(share + (1 if i < extra else 0), capacity[k] - alloc[k])
            alloc[k] += give
            progressed += give
        remaining -= progressed
        open_keys = [k for k in open_keys if alloc[k] < capacity[k]]
        if progressed == 0:
            break
    return alloc


def _random_memory(phi: np.ndarray) -> Memory:
    norms = np.linalg.norm(phi, axis=0)
    keep = norms > 0
    return Memory(phi[:, keep] / norms[keep], norms[keep] ** 2)


# -- runners -------------------------------------------------------------------


def _task_rng(seed: int, k: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, k, salt])


def _tcfg(tcfg: TrainConfig, seed: int, k: int) -> TrainConfig:
    d = asdict(tcfg)
    d["seed"] = seed * 1000 + k
    return TrainConfig(**d)


def _start(stream: TaskStream):
    theta = init_params(stream.family, stream.dim, stream.n_outputs)
    return theta, Memory.empty(stream.dim)


def _finish_memory(stream, mem: Memory, theta) -> Memory:
    return mem.with_responses(stream.family, theta)


def run_ours(stream: TaskStream, budget, delta: float, pcfg: PpcaConfig, tcfg: TrainConfig, seed: int = 0,
             soft_targets: bool = True, clip: float = 1e-4, on_memory=None) -> RunRecord:
    """Alternate task training and Hessian-matching memory updates."""
    budget = Budget.parse(budget)
    t0 = time.perf_counter()
    theta, mem = _start(stream)
    sizes, n_seen = [], 0
    for k, task in enumerate(stream.tasks):
        y = stream.targets(task.labels_train)
        theta_next = train_task(stream.family, theta, mem, task.phi_train, y, delta, _tcfg(tcfg, seed, k),
                                soft_targets=soft_targets)
        n_seen += task.n_train
        target_k = min(budget.size(k + 1, n_seen), stream.dim)
        cfg = PpcaConfig(**{**asdict(pcfg), "new_vectors_per_task": max(target_k - mem.K, 0)})
        rng = _task_rng(seed, k, 1)
        if stream.family is Family.LINEAR:
            new = update_memory_linear(task.phi_train, mem, cfg, rng)
        else:
            new = update_memory_logistic(stream.family, task.phi_train, mem, theta_next, cfg, clip, rng)
        theta, mem = theta_next, _finish_memory(stream, new, theta_next)
        sizes.append(mem.K)
        if on_memory:
            on_memory(k, mem)
    return _record("ours-ppca", stream, budget, seed, evaluate(stream, theta), t0,
                   memory_sizes=sizes, params=theta, memory=mem)


def run_svd(stream: TaskStream, budget, delta: float, tcfg: TrainConfig, seed: int = 0, on_memory=None) -> RunRecord:
    """Sequential truncated-eigendecomposition memory (linear regression only)."""
    if stream.family is not Family.LINEAR:
        raise ValueError("the svd baseline is defined for the linear family only")
    budget = Budget.parse(budget)
    t0 = time.perf_counter()
    theta, mem = _start(stream)
    sizes, n_seen = [], 0
    for k, task in enumerate(stream.tasks):
        y = stream.targets(task.labels_train)
        theta = train_task(stream.family, theta, mem, task.phi_train, y, delta, _tcfg(tcfg, seed, k))
        n_seen += task.n_train
        target_k = min(budget.size(k + 1, n_seen), stream.dim)
        mem = _finish_memory(stream, update_memory_svd(task.phi_train, mem, target_k), theta)
        sizes.append(mem.K)
        if on_memory:
            on_memory(k, mem)
    return _record("svd", stream, budget, seed, evaluate(stream, theta), t0,
                   memory_sizes=sizes, params=theta, memory=mem)


def run_kprior_random(stream: TaskStream, budget, delta: float, tcfg: TrainConfig, seed: int = 0,
                      soft_targets: bool = True, on_memory=None) -> RunRecord:
    """K-prior whose memory is a stored random subset of past feature vectors.

    Each stored column ``phi`` enters as ``u = phi / ||phi||`` with weight
    ``||phi||^2``; a zero budget leaves only the quadratic term.
    """
    budget = Budget.parse(budget)
    t0 = time.perf_counter()
    theta, mem = _start(stream)
    store = ExampleStore()
    sizes, n_seen = [], 0
    for k, task in enumerate(stream.tasks):
        y = stream.targets(task.labels_train)
        theta = train_task(stream.family, theta, mem, task.phi_train, y, delta, _tcfg(tcfg, seed, k),
                           soft_targets=soft_targets)
        n_seen += task.n_train
        store.refresh(k, task.n_train, budget.size(k + 1, n_seen), _task_rng(seed, k, 2))
        phi_mem, _ = store.gather(stream)
        mem = _finish_memory(stream, _random_memory(phi_mem), theta)
        sizes.append(store.size)
        if on_memory:
            on_memory(k, mem)
    return _record("kprior-random", stream, budget, seed, evaluate(stream, theta), t0,
                   memory_sizes=sizes, params=theta, memory=mem)


def run_replay(stream: TaskStream, budget, delta: float, tcfg: TrainConfig, seed: int = 0) -> RunRecord:
    """Rehearsal: current task plus stored examples, with ``0.5 delta ||theta||^2``.

    Each task starts from the previous parameters.  A zero budget reduces to
    sequential fine-tuning.
    """
    budget = Budget.parse(budget)
    t0 = time.perf_counter()
    theta, _ = _start(stream)
    zero = np.zeros_like(theta)
    empty = Memory.empty(stream.dim)
    store = ExampleStore()
    sizes, n_seen = [], 0
    for k, task in enumerate(stream.tasks):
        phi_old, lab_old = store.gather(stream)
        phi = np.hstack([task.phi_train, phi_old])
        labels = np.concatenate([task.labels_train, lab_old.astype(task.labels_train.dtype)])
        theta = train_task(stream.family, zero, empty, phi, stream.targets(labels), delta,
                           _tcfg(tcfg, seed, k), init=theta)
        n_seen += task.n_train
        store.refresh(k, task.n_train, budget.size(k + 1, n_seen), _task_rng(seed, k, 2))
        sizes.append(store.size)
    return _record("replay", stream, budget, seed, evaluate(stream, theta), t0, memory_sizes=sizes, params=theta)


def run_weight_reg(stream: TaskStream, delta: float, tcfg: TrainConfig, seed: int = 0) -> RunRecord:
    """Quadratic regularization towards the previous task's parameters."""
    t0 = time.perf_counter()
    theta, mem = _start(stream)
    for k, task in enumerate(stream.tasks):
        theta = train_task(stream.family, theta, mem, task.phi_train, stream.targets(task.labels_train), delta,
                           _tcfg(tcfg, seed, k))
    return _record("weight-reg", stream, None, seed, evaluate(stream, theta), t0,
                   memory_sizes=[0] * len(stream), params=theta)


def run_batch(stream: TaskStream, delta: float, tcfg: TrainConfig, seed: int = 0) -> RunRecord:
    """Joint training on the union of all tasks."""
    t0 = time.perf_counter()
    data = [(t.phi_train, stream.targets(t.labels_train)) for t in stream.tasks]
    theta = batch_train(stream.family, data, delta, _tcfg(tcfg, seed, 0), stream.n_outputs)
    return _record("batch", stream, None, seed, evaluate(stream, theta), t0, params=theta)


# -- configured runs -----------------------------------------------------------


def run_method(method: str, stream: TaskStream, budget, settings: dict, seed: int, memory_dir=None) -> RunRecord:
    """Dispatch one run from a flat settings dict (see :mod:`compactmem.config`).

    Training and memory failures are caught and reported in ``RunRecord.error``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    s = dict(settings)
    s.update(s.get("overrides", {}).get(method, {}))
    tcfg = TrainConfig(**{k: s[k] for k in ("lr", "iters", "batch_size", "epochs") if k in s}, seed=seed)
    pcfg = PpcaConfig(**{k: s[k] for k in ("epsilon", "em_iters", "init_scale", "weight_floor", "tol") if k in s},
                      seed=seed)
    delta = s.get("delta", 1.0)
    soft = s.get("soft_targets", True)
    hyper = {k: v for k, v in s.items() if k != "overrides"}
    budget_obj = Budget.parse(budget) if budget is not None else None

    on_memory = None
    if memory_dir is not None and method in ("ours-ppca", "svd", "kprior-random"):
        memory_dir = Path(memory_dir)
        memory_dir.mkdir(parents=True, exist_ok=True)
        tag = f"{method}_{stream.name}_{budget_obj.label.replace('%', 'pct')}_s{seed}"

        def on_memory(k, mem):
            save_memory(memory_dir / f"{tag}_task{k + 1}.kmem", mem,
                        {"method": method, "stream": stream.name, "budget": budget_obj.label, "seed": seed, "task": k + 1})

    t0 = time.perf_counter()
    try:
        if method == "ours-ppca":
            rec = run_ours(stream, budget_obj, delta, pcfg, tcfg, seed, soft, s.get("clip", 1e-4), on_memory)
        elif method == "svd":
            rec = run_svd(stream, budget_obj, delta, tcfg, seed, on_memory)
        elif method == "kprior-random":
            rec = run_kprior_random(stream, budget_obj, delta, tcfg, seed, soft, on_memory)
        elif method == "replay":
            rec = run_replay(stream, budget_obj, delta, tcfg, seed)
        elif method == "weight-reg":
            rec = run_weight_reg(stream, delta, tcfg, seed)
        else:
            rec = run_batch(stream, delta, tcfg, seed)
    except (TrainingError, EMError, ValueError, np.linalg.LinAlgError) as exc:
        log.error("%s on %s (budget %s, seed %d) aborted: %s", method, stream.name, budget, seed, exc)
        label = budget_obj.label if budget_obj else "-"
        return RunRecord(method, stream.name, label, seed, [], float("nan"), time.perf_counter() - t0,
                         hyperparams=hyper, error=f"{type(exc).__name__}: {exc}")
    rec.hyperparams = hyper
    return rec


def write_results(records: list[RunRecord], out_dir) -> tuple[Path, Path]:
    """Write ``results.csv`` and ``results.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "results.csv", out_dir / "results.json"
    csv_path.write_text(results_csv(records))
    json_path.write_text(json.dumps([r.to_dict() for r in records], indent=2) + "\n")
    return csv_path, json_path


def results_csv(records: list[RunRecord]) -> str:
    """CSV text: method, stream, budget, seed, task1..taskT, avg, wall_s (6 decimals)."""
    n_tasks = max((len(r.per_task_acc) for r in records), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "stream", "budget", "seed", *[f"task{i + 1}" for i in range(n_tasks)], "avg", "wall_s"])
    for r in records:
        accs = [f"{a:.6f}" for a in r.per_task_acc] + [""] * (n_tasks - len(r.per_task_acc))
        avg = f"{r.avg_acc:.6f}" if r.ok else "nan"
        w.writerow([r.method, r.stream, r.budget, r.seed, *accs, avg, f"{r.wall_clock_s:.6f}"])
    return buf.getvalue()


def _grid_job(job):
    from .config import build_stream

    method, budget, seed, stream_cfg, settings, data_root, memory_dir = job
    try:
        stream = build_stream(stream_cfg, seed, data_root)
    except (OSError, ValueError) as exc:
        log.error("cannot build stream %r for seed %d: %s", stream_cfg.get("kind"), seed, exc)
        label = Budget.parse(budget).label if budget is not None else "-"
        return RunRecord(method, stream_cfg.get("kind", "?"), label, seed, [], float("nan"), 0.0,
                         error=f"{type(exc).__name__}: {exc}")
    rec = run_method(method, stream, budget, settings, seed, memory_dir)
    if rec.ok and method != "batch" and stream_cfg.get("grid_agreement") and stream.family is Family.BINARY:
        ref = run_method("batch", stream, None, settings, seed)
        if ref.ok:
            rec.metrics["grid_agreement"] = grid_agreement(rec.params, ref.params, stream.info.get("degree", 5))
    rec.params = None
    rec.memory = None
    return rec


def run_grid(cfg: dict, out_dir=None, data_root=None, jobs: int = 1) -> list[RunRecord]:
    """Run every (method, budget, seed) combination of a parsed config.

    Methods without a memory (``weight-reg``, ``batch``) run once per seed.
    Records come back in the order of the sweep regardless of ``jobs``.
    """
    sweep = cfg["sweep"]
    memory_dir = None
    if out_dir is not None and cfg["memory"].get("dump"):
        memory_dir = str(Path(out_dir) / "memory")
    settings = {**cfg["method"], **cfg["train"], **{k: v for k, v in cfg["memory"].items() if k != "dump"}}
    settings.pop("name", None)
    jobs_list = []
    for method in sweep["methods"]:
        budgets = sweep["budgets"] if method not in ("weight-reg", "batch") else [None]
        for budget in budgets:
            for seed in sweep["seeds"]:
                jobs_list.append((method, budget, seed, cfg["stream"], settings, data_root, memory_dir))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_grid_job, jobs_list))
    else:
        records = [_grid_job(j) for j in jobs_list]
    if out_dir is not None:
        write_results(records, out_dir)
    return records


# -- memory images ---------------------------------------------------------------


def export_memory_images(mem: Memory, shape, out_dir, drop_bias: bool = False) -> list[Path]:
    """Write memory vectors as 8-bit PGM images, largest weight first.

    Each column is reshaped to ``shape`` (after removing the leading bias
    entry when ``drop_bias``) and min-max scaled to 0..255.  Alongside each
    ``mem_XXXX.pgm`` a ``mem_XXXX.f8`` file keeps the exact column as
    little-endian float64, and ``index.json`` lists rank, original column and
    weight.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = tuple(int(s) for s in shape)
    U = mem.U[1:] if drop_bias else mem.U
    if int(np.prod(shape)) != U.shape[0]:
        raise ValueError(f"cannot reshape vectors of length {U.shape[0]} to {shape}")
    order = np.argsort(-mem.w, kind="stable")
    written, index = [], []
    for rank, k in enumerate(order):
        col = np.ascontiguousarray(U[:, k], dtype="<f8")
        lo, hi = col.min(), col.max()
        img = np.zeros(col.shape) if hi == lo else (col - lo) / (hi - lo)
        pix = np.round(255 * img).astype(np.uint8).reshape(shape)
        stem = f"mem_{rank:04d}"
        pgm = out_dir / f"{stem}.pgm"
        with open(pgm, "wb") as fh:
            fh.write(f"P5\n{shape[1]} {shape[0]}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
        (out_dir / f"{stem}.f8").write_bytes(col.tobytes())
        written.append(pgm)
        index.append({"rank": rank, "column": int(k), "weight": float(mem.w[k]), "file": pgm.name})
    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return written


def read_raw_column(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").copy()


__all__ = [
    "METHODS",
    "Budget",
    "ExampleStore",
    "RunRecord",
    "evaluate",
    "export_memory_images",
    "grid_agreement",
    "read_raw_column",
    "results_csv",
    "run_batch",
    "run_grid",
    "run_kprior_random",
    "run_method",
    "run_ours",
    "run_replay",
    "run_svd",
    "run_weight_reg",
    "write_results",
]
