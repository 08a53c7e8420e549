"""Task streams: four-moon, USPS odd-vs-even, Split-MNIST regression and feature dumps.

On-disk formats
---------------
USPS
    The LIBSVM distribution: ``usps`` (train) and ``usps.t`` (test), plain or
    ``.bz2``.  Lines read ``<digit + 1> <index>:<value> ...`` with pixel values
    in [-1, 1]; they are rescaled to [0, 1].
MNIST
    The original idx files ``train-images-idx3-ubyte``,
    ``train-labels-idx1-ubyte``, ``t10k-images-idx3-ubyte`` and
    ``t10k-labels-idx1-ubyte``, plain or ``.gz``.  Pixels are scaled to [0, 1].
Feature dumps
    A JSON manifest ``{name, family, num_classes, tasks: [{features, labels,
    classes: [lo, hi], test_features?, test_labels?}]}`` with paths relative to
    the manifest.  Feature files hold a ``uint32 P, uint32 N`` header followed
    by a row-major little-endian float32 ``P x N`` matrix; label files hold a
    ``uint32 N`` header followed by N little-endian int32 labels.  Class ranges
    are inclusive.
"""

from __future__ import annotations

import bz2
import functools
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .glm import Family, as_family, poly_features

USPS_PAIRS = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
MNIST_PAIRS = USPS_PAIRS

# 632 x 251 points over [-3.2, 3.2] x [-1.2, 1.2] -> 158,632 grid inputs
FOUR_MOON_GRID_SHAPE = (632, 251)
FOUR_MOON_BOX = ((-3.2, 3.2), (-1.2, 1.2))


@dataclass
class Task:
    phi_train: np.ndarray
    labels_train: np.ndarray
    phi_test: np.ndarray
    labels_test: np.ndarray
    classes: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return self.phi_train.shape[1]


@dataclass
class TaskStream:
    """Ordered tasks sharing one feature space.

    ``target_encoding`` says how integer labels become training targets:
    ``"binary"`` (labels in {0, 1}), ``"index"`` (class indices for softmax)
    or ``"centered-onehot"`` (``e_k - 1/C`` regression targets).
    """

    name: str
    family: Family
    tasks: list
    n_outputs: int | None = None
    target_encoding: str = "binary"
    seed: int | None = None
    class_map: dict = field(default_factory=dict)
    domain_incremental: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = as_family(self.family)
        self.check()

    @property
    def dim(self) -> int:
        return self.tasks[0].phi_train.shape[0]

    def __len__(self) -> int:
        return len(self.tasks)

    def targets(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if self.target_encoding == "binary":
            return labels.astype(np.float64)
        if self.target_encoding == "index":
            return labels.astype(np.int64)
        if self.target_encoding == "centered-onehot":
            return centered_onehot(labels, self.n_outputs)
        raise ValueError(f"unknown target encoding {self.target_encoding!r}")

    def check(self) -> None:
        if not self.tasks:
            raise ValueError("a task stream needs at least one task")
        dims = {t.phi_train.shape[0] for t in self.tasks} | {t.phi_test.shape[0] for t in self.tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks disagree on feature dimension: {sorted(dims)}")
        for t in self.tasks:
            if t.phi_train.shape[1] != t.labels_train.shape[0] or t.phi_test.shape[1] != t.labels_test.shape[0]:
                raise ValueError("features and labels disagree on the number of examples")
            if not (np.all(np.isfinite(t.phi_train)) and np.all(np.isfinite(t.phi_test))):
                raise ValueError("features must be finite")
        if self.family is Family.MULTICLASS and not self.domain_incremental:
            seen = set()
            for t in self.tasks:
                cls = set(t.classes)
                if seen & cls:
                    raise ValueError(f"class sets overlap across tasks: {sorted(seen & cls)}")
                seen |= cls


def centered_onehot(labels, n_classes: int = 10) -> np.ndarray:
    """Encode class ``k`` as ``e_k - (1/C) 1``; returns a ``(C, N)`` array."""
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.full((n_classes, labels.size), -1.0 / n_classes)
    Y[labels, np.arange(labels.size)] += 1.0
    return Y


def with_bias(X: np.ndarray) -> np.ndarray:
    """Degree-1 feature map ``[1, x]`` for the rows of ``X``, column-wise."""
    return poly_features(X, 1)


# -- four moon -------------------------------------------------------------

# pair B is shifted by two units so its upper crescent interlocks with pair A's
# lower one; the chain is then centred and scaled to x in [-3, 3], y in [-0.9, 0.9]
_PAIR_SHIFTS = (0.0, 2.0)
_CENTER = np.array([1.5, 0.25])
_SCALE = 1.2


def _arc(label: int, t: np.ndarray, shift: float) -> np.ndarray:
    # the two crescents of the usual two-moons construction
    if label == 0:
        xy = np.stack([np.cos(t), np.sin(t)], axis=1)
    else:
        xy = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return (xy + np.array([shift, 0.0]) - _CENTER) * _SCALE


def _half_range(label: int, half: int):
    # left half of the upper crescent is t in [pi/2, pi]; of the lower one t in [0, pi/2]
    left = (np.pi / 2, np.pi) if label == 0 else (0.0, np.pi / 2)
    right = (0.0, np.pi / 2) if label == 0 else (np.pi / 2, np.pi)
    return left if half == 0 else right


def _four_moon_task(k: int, n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    pair, half = divmod(k, 2)
    n0 = (n + 1) // 2
    xs, ys = [], []
    for label, count in ((0, n0), (1, n - n0)):
        lo, hi = _half_range(label, half)
        t = rng.uniform(lo, hi, size=count)
        xs.append(_arc(label, t, _PAIR_SHIFTS[pair]) + noise * rng.standard_normal((count, 2)))
        ys.append(np.full(count, label, dtype=np.int64))
    X, y = np.concatenate(xs), np.concatenate(ys)
    perm = rng.permutation(n)
    return X[perm], y[perm]


def four_moon_grid():
    """Dense evaluation grid (158,632 inputs) labelled by the nearest crescent."""
    (x0, x1), (y0, y1) = FOUR_MOON_BOX
    nx, ny = FOUR_MOON_GRID_SHAPE
    gx, gy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny), indexing="ij")
    X = np.stack([gx.ravel(), gy.ravel()], axis=1)
    t = np.linspace(0.0, np.pi, 400)
    arcs, labels = [], []
    for shift in _PAIR_SHIFTS:
        for label in (0, 1):
            arcs.append(_arc(label, t, shift))
            labels.append(np.full(t.size, label))
    _, nearest = cKDTree(np.concatenate(arcs)).query(X)
    return X, np.concatenate(labels)[nearest]


def gen_four_moon(n_per_task: int = 500, noise: float = 0.1, seed: int = 0, degree: int = 5, n_test: int | None = None) -> TaskStream:
    """Four binary tasks sweeping left to right along a chain of four crescents.

    Two two-moons pairs are placed side by side so that they interlock into
    one chain spanning x in about [-3, 3].  Task ``2p`` holds the left halves of both crescents of pair ``p`` and task
    ``2p + 1`` the right halves, so each task is balanced.  Features are the
    degree-``degree`` polynomial map of the 2-D inputs.  Each task's test set
    is a fresh sample of ``n_test`` points (default ``n_per_task``) from the
    same region; the dense grid is available from :func:`four_moon_grid`.
    """
    if n_per_task < 2:
        raise ValueError("n_per_task must be at least 2")
    rng = np.random.default_rng(seed)
    n_test = n_per_task if n_test is None else n_test
    tasks = []
    for k in range(4):
        Xtr, ytr = _four_moon_task(k, n_per_task, noise, rng)
        Xte, yte = _four_moon_task(k, n_test, noise, rng)
        tasks.append(Task(poly_features(Xtr, degree), ytr, poly_features(Xte, degree), yte, (0, 1), {"inputs": Xtr}))
    return TaskStream("four-moon", Family.BINARY, tasks, None, "binary", seed, info={"degree": degree, "noise": noise})


# -- USPS ------------------------------------------------------------------


def _find(directory: Path, stem: str, suffixes=("", ".bz2", ".gz")) -> Path:
    for suf in suffixes:
        p = directory / (stem + suf)
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[{'|'.join(s for s in suffixes if s)}] not found in {directory}")


def _data_directory(path) -> Path:
    """The directory holding a dataset, given it or a file inside it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file or directory")
    return path if path.is_dir() else path.parent


@functools.lru_cache(maxsize=4)
def _read_usps(path: str):
    from sklearn.datasets import load_svmlight_file

    try:
        X, y = load_svmlight_file(path, n_features=256)
    except Exception as exc:
        raise ValueError(f"{path}: not a readable LIBSVM USPS file ({exc})") from exc
    X = (np.asarray(X.todense()) + 1.0) / 2.0
    digits = np.rint(y).astype(np.int64) - 1
    if X.shape[1] != 256 or digits.min() < 0 or digits.max() > 9:
        raise ValueError(f"{path}: unexpected USPS contents (shape {X.shape}, labels {digits.min()}..{digits.max()})")
    return X, digits


def _subsample(rng, idx: np.ndarray, n: int) -> np.ndarray:
    if idx.size <= n:
        return rng.permutation(idx)
    return rng.choice(idx, size=n, replace=False)


def load_usps_odd_even(path, seed: int = 0, n_train: int = 1000, n_test: int = 300) -> TaskStream:
    """Five parity tasks on digit pairs (0,1) ... (8,9) with features ``[1, x]``."""
    directory = _data_directory(path)
    Xtr, dtr = _read_usps(str(_find(directory, "usps")))
    Xte, dte = _read_usps(str(_find(directory, "usps.t")))
    rng = np.random.default_rng(seed)
    tasks = []
    for pair in USPS_PAIRS:
        itr = _subsample(rng, np.flatnonzero(np.isin(dtr, pair)), n_train)
        ite = _subsample(rng, np.flatnonzero(np.isin(dte, pair)), n_test)
        tasks.append(Task(with_bias(Xtr[itr]), dtr[itr] % 2, with_bias(Xte[ite]), dte[ite] % 2, (0, 1), {"digits": pair}))
    return TaskStream("usps-odd-even", Family.BINARY, tasks, None, "binary", seed)


# -- MNIST -----------------------------------------------------------------


def _open(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    if path.suffix == ".bz2":
        return bz2.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an idx (ubyte) array as used by the MNIST distribution."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad idx magic")
    if raw[2] != 0x08:
        raise ValueError(f"{path}: only unsigned byte idx files are supported")
    ndim = raw[3]
    shape = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


@functools.lru_cache(maxsize=2)
def _read_mnist(directory: str):
    d = Path(directory)
    out = []
    for prefix in ("train", "t10k"):
        images = read_idx(_find(d, f"{prefix}-images-idx3-ubyte", ("", ".gz")))
        labels = read_idx(_find(d, f"{prefix}-labels-idx1-ubyte", ("", ".gz")))
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"{d}: {prefix} images and labels differ in count")
        out.append((images.reshape(images.shape[0], -1).astype(np.float64) / 255.0, labels.astype(np.int64)))
    return tuple(out)


def load_split_mnist_regression(path, seed: int = 0) -> TaskStream:
    """Split-MNIST as five 10-output linear regression tasks.

    Features are the 784 raw pixels, targets ``e_k - 0.1``; accuracy decodes
    by argmax over all ten outputs.  The seed only shuffles example order.
    """
    directory = _data_directory(path)
    (Xtr, ytr), (Xte, yte) = _read_mnist(str(directory))
    rng = np.random.default_rng(seed)
    tasks = []
    for pair in MNIST_PAIRS:
        itr = rng.permutation(np.flatnonzero(np.isin(ytr, pair)))
        ite = np.flatnonzero(np.isin(yte, pair))
        tasks.append(Task(Xtr[itr].T.copy(), ytr[itr], Xte[ite].T.copy(), yte[ite], pair))
    return TaskStream(
        "split-mnist", Family.LINEAR, tasks, 10, "centered-onehot", seed,
        class_map={c: c for c in range(10)},
    )


# -- feature dumps -------------------------------------------------------------

_FEAT_HEADER = struct.Struct("<II")
_LABEL_HEADER = struct.Struct("<I")


def write_features(path, phi: np.ndarray) -> None:
    phi = np.asarray(phi)
    with open(path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(*phi.shape))
        fh.write(np.ascontiguousarray(phi, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    P, N = _FEAT_HEADER.unpack_from(raw)
    if len(raw) != _FEAT_HEADER.size + 4 * P * N:
        raise ValueError(f"{path}: header says {P}x{N} but file holds {(len(raw) - 8) // 4} values")
    return np.frombuffer(raw, dtype="<f4", offset=_FEAT_HEADER.size).reshape(P, N)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(labels.size))
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _LABEL_HEADER.size:
        raise ValueError(f"{path}: truncated label file")
    (N,) = _LABEL_HEADER.unpack_from(raw)
    if len(raw) != _LABEL_HEADER.size + 4 * N:
        raise ValueError(f"{path}: header says {N} labels but file holds {(len(raw) - 4) // 4}")
    return np.frombuffer(raw, dtype="<i4", offset=_LABEL_HEADER.size)


def write_feature_dump(directory, name: str, tasks, num_classes: int, family="multiclass", extra: dict | None = None) -> Path:
    """Write a feature-dump manifest and its binary files.

    ``tasks`` is a sequence of dicts with ``features`` (P x N), ``labels`` (N,),
    ``classes`` ([lo, hi]) and optionally ``test_features`` / ``test_labels``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(tasks):
        entry = {"classes": [int(c) for c in t["classes"]]}
        for key in ("features", "test_features"):
            if key in t:
                entry[key] = f"task{i}_{key}.f32"
                write_features(directory / entry[key], t[key])
        for key in ("labels", "test_labels"):
            if key in t:
                entry[key] = f"task{i}_{key}.i32"
                write_labels(directory / entry[key], t[key])
        entries.append(entry)
    manifest = {"name": name, "family": str(as_family(family).value), "num_classes": num_classes, "tasks": entries}
    manifest.update(extra or {})
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


_MANIFEST_KEYS = {"name", "family", "num_classes", "tasks", "test_fraction", "seed", "domain_incremental"}
_TASK_KEYS = {"features", "labels", "classes", "test_features", "test_labels"}


def load_feature_dump(manifest_path) -> TaskStream:
    """Stream of externally computed features described by a JSON manifest.

    Tasks without explicit test files are split deterministically, holding out
    ``test_fraction`` (default 0.2) of the examples with the manifest ``seed``.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise ValueError(f"{manifest_path}: unknown manifest keys {sorted(unknown)}")
    for key in ("name", "num_classes", "tasks"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: missing key {key!r}")
    base = manifest_path.parent
    family = as_family(manifest.get("family", "multiclass"))
    n_classes = int(manifest["num_classes"])
    rng = np.random.default_rng(manifest.get("seed", 0))
    frac = float(manifest.get("test_fraction", 0.2))
    tasks, dim = [], None
    for i, entry in enumerate(manifest["tasks"]):
        unknown = set(entry) - _TASK_KEYS
        if unknown:
            raise ValueError(f"{manifest_path}: task {i} has unknown keys {sorted(unknown)}")
        lo, hi = entry["classes"]
        feats = read_features(base / entry["features"]).astype(np.float64)
        labels = read_labels(base / entry["labels"]).astype(np.int64)
        if feats.shape[1] != labels.size:
            raise ValueError(f"{entry['features']}: {feats.shape[1]} columns but {entry['labels']} has {labels.size} labels")
        if dim is None:
            dim = feats.shape[0]
        elif feats.shape[0] != dim:
            raise ValueError(f"{entry['features']}: feature dimension {feats.shape[0]} differs from {dim}")
        if "test_features" in entry:
            tfeats = read_features(base / entry["test_features"]).astype(np.float64)
            tlabels = read_labels(base / entry["test_labels"]).astype(np.int64)
            if tfeats.shape[0] != dim:
                raise ValueError(f"{entry['test_features']}: feature dimension {tfeats.shape[0]} differs from {dim}")
            if tfeats.shape[1] != tlabels.size:
                raise ValueError(f"{entry['test_features']}: column count differs from {entry['test_labels']}")
        else:
            perm = rng.permutation(labels.size)
            n_test = int(round(frac * labels.size))
            te, tr = perm[:n_test], perm[n_test:]
            tfeats, tlabels = feats[:, te], labels[te]
            feats, labels = feats[:, tr], labels[tr]
        for lab, src in ((labels, entry["labels"]), (tlabels, entry.get("test_labels", entry["labels"]))):
            if lab.size and (lab.min() < lo or lab.max() > hi or hi >= n_classes):
                raise ValueError(f"{src}: labels outside the declared class range [{lo}, {hi}]")
        tasks.append(Task(feats, labels, tfeats, tlabels, tuple(range(lo, hi + 1))))
    encoding = "binary" if family is Family.BINARY else "index"
    return TaskStream(
        manifest["name"], family, tasks,
        None if family is Family.BINARY else n_classes, encoding,
        manifest.get("seed"),
        class_map={c: c for c in range(n_classes)},
        domain_incremental=bool(manifest.get("domain_incremental", False)),
    )


def synthetic_feature_dump(directory, n_tasks: int = 5, classes_per_task: int = 2, dim: int = 768, latent_dim: int = 16, n_train_per_class: int = 500, n_test_per_class: int = 200, noise: float = 0.05, seed: int = 0) -> Path:
    """Write a multiclass dump of random-projection features.

    Each class is a Gaussian blob in a ``latent_dim`` space; features are a
    fixed random projection of the latent point to ``dim`` dimensions plus
    small isotropic noise and a constant entry.
    """
    rng = np.random.default_rng(seed)
    n_classes = n_tasks * classes_per_task
    means = 1.5 * rng.standard_normal((n_classes, latent_dim))
    R = rng.standard_normal((dim - 1, latent_dim)) / np.sqrt(latent_dim)

    def sample(c, n):
        z = means[c] + rng.standard_normal((n, latent_dim))
        x = z @ R.T + noise * rng.standard_normal((n, dim - 1))
        return np.vstack([np.ones((1, n)), x.T])

    tasks = []
    for t in range(n_tasks):
        cls = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        tr = [sample(c, n_train_per_class) for c in cls]
        te = [sample(c, n_test_per_class) for c in cls]
        tasks.append({
            "features": np.hstack(tr), "labels": np.repeat(cls, n_train_per_class),
            "test_features": np.hstack(te), "test_labels": np.repeat(cls, n_test_per_class),
            "classes": [cls[0], cls[-1]],
        })
    return write_feature_dump(directory, "synthetic-dump", tasks, n_classes, extra={"seed": seed})


def data_dir(explicit=None) -> Path | None:
    value = explicit or os.environ.get("DATA_DIR")
    return Path(value) if value else None


__all__ = [
    "FOUR_MOON_GRID_SHAPE",
    "Task",
    "TaskStream",
    "centered_onehot",
    "data_dir",
    "four_moon_grid",
    "gen_four_moon",
    "load_feature_dump",
    "load_split_mnist_regression",
    "load_usps_odd_even",
    "read_features",
    "read_idx",
    "read_labels",
    "synthetic_feature_dump",
    "with_bias",
    "write_feature_dump",
    "write_features",
    "write_idx",
    "write_labels",
]
