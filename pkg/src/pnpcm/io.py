"""Tensor files, image loading and run-configuration parsing."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from PIL import Image

from . import protocol
from .tensor import as_tensor

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TENSOR_SUFFIXES = (".pnpt",)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration; the message names the key."""


def save_tensor(path, x: np.ndarray) -> None:
    """Write ``x`` as a PNPT tensor file (atomically, via a temp file)."""
    x = as_tensor(x)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(protocol.encode_file(x))
    os.replace(tmp, path)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        x = protocol.decode_file(lambda n: protocol.read_exact(f, n))
        if f.read(1):
            raise protocol.ProtocolError(f"{path}: trailing bytes after payload")
    return x


def load_image(path, layout: str = "auto", expected_shape=None) -> np.ndarray:
    """Load an image or tensor file.

    Raster images (8- or 16-bit, grayscale or RGB) are scaled to [0, 1].
    ``layout`` is ``auto`` (as stored), ``gray`` or ``rgb``. ``.pnpt`` files
    are returned verbatim, including complex data.
    """
    path = Path(path)
    if path.suffix.lower() in TENSOR_SUFFIXES:
        x = load_tensor(path)
    else:
        try:
            img = Image.open(path)
            img.load()
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise OSError(f"{path}: unsupported image container ({exc})") from None
        x = _raster_to_array(img, layout)
    if expected_shape is not None and tuple(x.shape) != tuple(expected_shape):
        raise ValueError(f"{path}: shape {x.shape} does not match configured {tuple(expected_shape)}")
    return x


def _raster_to_array(img: Image.Image, layout: str) -> np.ndarray:
    mode = img.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        scale = 65535.0
        if layout == "rgb":
            raise ValueError("16-bit images are grayscale only")
        return arr / scale
    if mode in ("L", "P", "1"):
        img = img.convert("L")
    elif mode not in ("RGB",):
        img = img.convert("RGB")
    if layout == "gray" and img.mode != "L":
        img = img.convert("L")
    elif layout == "rgb" and img.mode != "RGB":
        img = img.convert("RGB")
    elif layout not in ("auto", "gray", "rgb"):
        raise ValueError(f"unknown layout {layout!r}")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_png(path, x: np.ndarray) -> None:
    """8-bit PNG preview of a real image (clipped to [0, 1]) or complex magnitude."""
    arr = np.abs(x) if np.iscomplexobj(x) else x
    if np.iscomplexobj(x):
        peak = arr.max() if arr.max() > 0 else 1.0
        arr = arr / peak
    img = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


# -- run configuration ------------------------------------------------------

_SCHEMA: Dict[str, Dict[str, type]] = {
    "task": {
        "operator": str, "keep_fraction": float, "mask_file": str,
        "kernel_size": int, "kernel_sigma": float, "boundary": str,
        "factor": int, "method": str,
        "acceleration": int, "acs_lines": int, "n_coils": int, "sampling_file": str,
        "sigma_y": float, "seed": int, "image": str, "image_dir": str,
        "measurement": str, "layout": str, "peak": float,
    },
    "denoiser": {
        "kind": str, "strength_scale": float, "max_iters": int, "tol": float,
        "command": list, "address": str, "timeout": float,
    },
    "schedule": {
        "n_steps": int, "t": list, "t_rule": dict, "rho": list, "rho_rule": dict,
        "beta": list, "beta_rule": dict, "noise": list, "noise_rule": dict,
    },
    "solver": {
        "cg_max_iters": int, "cg_rel_tol": float, "cg_abs_tol": float, "linear_solver": str,
        "noise_injection": bool, "momentum": bool, "divergence_guard": bool,
    },
    "theorem": {
        "lipschitz_pairs": int, "perturbation_scale": float, "inflation": float,
        "tolerance": float, "mode": str,
    },
    "output": {"dir": str, "record": str, "save_png": bool, "save_iterates": bool},
}
_REQUIRED = [("task", "operator"), ("denoiser", "kind"), ("schedule", "n_steps")]
_RULE_KEYS = {"geometric": ("start", "decay"), "constant": ("value",)}


def _check_type(section, key, value, typ):
    where = f"[{section}].{key}"
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
    elif typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif not isinstance(value, typ):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}")


@dataclass
class ExperimentConfig:
    """Validated contents of a run-configuration file.

    Sections are kept as plain dictionaries so that the echo written into
    run records reparses to an equal config.
    """

    task: Dict[str, Any]
    denoiser: Dict[str, Any]
    schedule: Dict[str, Any]
    solver: Dict[str, Any] = field(default_factory=dict)
    theorem: Dict[str, Any] = field(default_factory=dict)
    output: Dict[str, Any] = field(default_factory=dict)
    base_dir: Optional[str] = field(default=None, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy({s: getattr(self, s) for s in _SCHEMA})

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir=None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a table")
        for section in data:
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
        for section, keys in _SCHEMA.items():
            body = data.get(section, {})
            if not isinstance(body, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in body.items():
                if key not in keys:
                    raise ConfigError(f"unknown key [{section}].{key}")
                _check_type(section, key, value, keys[key])
                if key.endswith("_rule"):
                    _check_rule(section, key, value)
        for section, key in _REQUIRED:
            if key not in data.get(section, {}):
                raise ConfigError(f"missing required key [{section}].{key}")
        return cls(**{s: copy.deepcopy(dict(data.get(s, {}))) for s in _SCHEMA}, base_dir=base_dir)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p


def _check_rule(section, key, rule):
    kind = rule.get("rule")
    if kind not in _RULE_KEYS:
        raise ConfigError(f"[{section}].{key}: rule must be one of {sorted(_RULE_KEYS)}, got {kind!r}")
    for k in rule:
        if k != "rule" and k not in _RULE_KEYS[kind]:
            raise ConfigError(f"unknown key [{section}].{key}.{k}")
    for k in _RULE_KEYS[kind]:
        if k not in rule:
            raise ConfigError(f"missing required key [{section}].{key}.{k}")


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return ExperimentConfig.from_dict(data, base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=str(path.parent))


def schedule_values(cfg: ExperimentConfig, name: str, length: int, default=None) -> Optional[np.ndarray]:
    """Resolve one schedule sequence from an explicit array or a generator rule.

    Index ``i`` of the result is the parameter at ``n = i`` for ``t`` and at
    ``n = i + 1`` for the others. ``geometric`` rules yield
    ``start * decay**(N - n)`` so the largest value is used first.
    """
    sched = cfg.schedule
    N = sched["n_steps"]
    if name in sched:
        vals = np.asarray(sched[name], dtype=np.float64)
        if vals.shape != (length,):
            raise ConfigError(f"[schedule].{name}: expected {length} values, got {vals.size}")
        return vals
    rule = sched.get(f"{name}_rule")
    if rule is None:
        if default is None:
            raise ConfigError(f"missing required key [schedule].{name} (or {name}_rule)")
        return np.asarray(default, dtype=np.float64)
    offset = 0 if length == N + 1 else 1
    n = np.arange(length) + offset
    if rule["rule"] == "constant":
        return np.full(length, float(rule["value"]))
    return float(rule["start"]) * float(rule["decay"]) ** (N - n)
