"""Experiment configuration files (TOML or JSON).

A config has up to five sections::

    [stream]   kind = "four-moon" | "usps-odd-even" | "split-mnist"
                      | "feature-dump" | "synthetic-dump", plus loader options
    [method]   name, delta, soft_targets, and [method.overrides.<method>] tables
    [train]    lr, iters, epochs, batch_size
    [memory]   budget, epsilon, em_iters, init_scale, weight_floor, tol, clip, dump
    [sweep]    methods, budgets, seeds

Unknown sections or keys raise :class:`ConfigError` naming where they occur.
"""

from __future__ import annotations

import functools
import json
import sys
import tempfile
from pathlib import Path

from .bench import METHODS, Budget
from .ppca import INIT_SCALES
from .tasks import (
    data_dir,
    gen_four_moon,
    load_feature_dump,
    load_split_mnist_regression,
    load_usps_odd_even,
    synthetic_feature_dump,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration file."""


STREAM_KINDS = ("four-moon", "usps-odd-even", "split-mnist", "feature-dump", "synthetic-dump")

_NUM = (int, float)
_SCHEMA = {
    "stream": {
        "kind": str, "path": str, "manifest": str, "seed": int, "grid_agreement": bool,
        "n_per_task": int, "noise": _NUM, "degree": int, "n_test": int, "n_train": int,
        "n_tasks": int, "classes_per_task": int, "dim": int, "latent_dim": int,
        "n_train_per_class": int, "n_test_per_class": int,
    },
    "method": {"name": str, "delta": _NUM, "soft_targets": bool, "overrides": dict},
    "train": {"lr": _NUM, "iters": int, "epochs": int, "batch_size": int},
    "memory": {
        "budget": (int, str), "epsilon": _NUM, "em_iters": int, "init_scale": str,
        "weight_floor": _NUM, "tol": _NUM, "clip": _NUM, "dump": bool,
    },
    "sweep": {"methods": list, "budgets": list, "seeds": list},
}
_OVERRIDABLE = {**_SCHEMA["method"], **_SCHEMA["train"], **_SCHEMA["memory"]}
for _k in ("name", "overrides", "budget", "dump"):
    _OVERRIDABLE.pop(_k)


def load_config(path) -> dict:
    """Read and validate a config file; returns a dict with all five sections."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    return validate_config(raw, str(path))


def _check_type(value, expected, where):
    allowed = expected if isinstance(expected, tuple) else (expected,)
    if not isinstance(value, expected) or (isinstance(value, bool) and bool not in allowed):
        raise ConfigError(f"{where}: expected {_type_name(expected)}, got {type(value).__name__}")


def _type_name(expected):
    if isinstance(expected, tuple):
        return " or ".join(t.__name__ for t in expected)
    return expected.__name__


def validate_config(raw: dict, source: str = "<config>") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a table")
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}] (expected one of {', '.join(_SCHEMA)})")
    cfg = {}
    for section, keys in _SCHEMA.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        for key, value in body.items():
            if key not in keys:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            _check_type(value, keys[key], f"{source}: [{section}] {key}")
        cfg[section] = dict(body)

    stream = cfg["stream"]
    if "kind" not in stream:
        raise ConfigError(f"{source}: [stream] needs a 'kind' ({', '.join(STREAM_KINDS)})")
    if stream["kind"] not in STREAM_KINDS:
        raise ConfigError(f"{source}: [stream] kind '{stream['kind']}' is not one of {', '.join(STREAM_KINDS)}")
    if stream["kind"] == "feature-dump" and "manifest" not in stream:
        raise ConfigError(f"{source}: [stream] kind 'feature-dump' needs a 'manifest'")

    method = cfg["method"]
    if "name" in method and method["name"] not in METHODS:
        raise ConfigError(f"{source}: [method] name '{method['name']}' is not one of {', '.join(METHODS)}")
    if "delta" in method and not method["delta"] > 0:
        raise ConfigError(f"{source}: [method] delta must be positive")
    for name, body in method.get("overrides", {}).items():
        if name not in METHODS:
            raise ConfigError(f"{source}: [method.overrides] unknown method '{name}'")
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: [method.overrides.{name}] must be a table")
        for key, value in body.items():
            if key not in _OVERRIDABLE:
                raise ConfigError(f"{source}: unknown key '{key}' in [method.overrides.{name}]")
            _check_type(value, _OVERRIDABLE[key], f"{source}: [method.overrides.{name}] {key}")

    memory = cfg["memory"]
    if "budget" in memory:
        _budget(memory["budget"], f"{source}: [memory] budget")
    for where, body in [("[memory]", memory)] + [
            (f"[method.overrides.{n}]", b) for n, b in method.get("overrides", {}).items()]:
        if body.get("init_scale", "fit") not in INIT_SCALES:
            raise ConfigError(f"{source}: {where} init_scale must be one of {', '.join(INIT_SCALES)}")

    sweep = cfg["sweep"]
    sweep.setdefault("methods", [method.get("name", "ours-ppca")])
    sweep.setdefault("budgets", [memory.get("budget", 0)])
    sweep.setdefault("seeds", [0])
    for m in sweep["methods"]:
        if m not in METHODS:
            raise ConfigError(f"{source}: [sweep] methods: unknown method '{m}'")
    for i, b in enumerate(sweep["budgets"]):
        _budget(b, f"{source}: [sweep] budgets[{i}]")
    for i, s in enumerate(sweep["seeds"]):
        if not isinstance(s, int) or isinstance(s, bool):
            raise ConfigError(f"{source}: [sweep] seeds[{i}] must be an integer")
    return cfg


def _budget(value, where):
    try:
        return Budget.parse(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _resolve(path: str | None, root: Path | None, default: str) -> Path:
    p = Path(path) if path else Path(default)
    if not p.is_absolute() and root is not None:
        p = root / p
    return p


def build_stream(stream_cfg: dict, seed: int, data_root=None):
    """Construct the task stream described by a ``[stream]`` section.

    Relative paths are resolved against ``data_root`` (or ``$DATA_DIR``).
    The stream's own ``seed`` key, when present, fixes the data independently
    of the run seed.
    """
    key = json.dumps(stream_cfg, sort_keys=True)
    return _build_stream_cached(key, stream_cfg.get("seed", seed), str(data_root) if data_root else None)


@functools.lru_cache(maxsize=8)
def _build_stream_cached(key: str, seed: int, data_root: str | None):
    cfg = json.loads(key)
    root = data_dir(data_root)
    kind = cfg["kind"]
    if kind == "four-moon":
        return gen_four_moon(cfg.get("n_per_task", 500), cfg.get("noise", 0.1), seed, cfg.get("degree", 5), cfg.get("n_test"))
    if kind == "usps-odd-even":
        return load_usps_odd_even(_resolve(cfg.get("path"), root, "usps"), seed, cfg.get("n_train", 1000), cfg.get("n_test", 300))
    if kind == "split-mnist":
        return load_split_mnist_regression(_resolve(cfg.get("path"), root, "mnist"), seed)
    if kind == "feature-dump":
        return load_feature_dump(_resolve(cfg["manifest"], root, ""))
    opts = {k: cfg[k] for k in ("n_tasks", "classes_per_task", "dim", "latent_dim", "n_train_per_class",
                                "n_test_per_class", "noise") if k in cfg}
    with tempfile.TemporaryDirectory(prefix="synthetic-dump-") as tmp:
        return load_feature_dump(synthetic_feature_dump(tmp, seed=seed, **opts))


__all__ = ["ConfigError", "STREAM_KINDS", "build_stream", "load_config", "validate_config"]
