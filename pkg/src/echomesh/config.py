"""Pipeline configuration: a single JSON document with every default materialized."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Optional

from . import echo, metrics, ot, views
from .errors import EchoMeshError


class ConfigError(EchoMeshError):
    """The configuration is unusable; the CLI exits with status 2."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "out",
    "corpus_dir": None,
    "template": None,
    "patients": None,
    "views": "builtin",
    "atria_labels": None,
    "jitter": {
        "delta_mm": [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        "angles_deg": [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
        "scale": [1.0, 1.0],
    },
    "raster": {
        "width": views.DEFAULT_RASTER[0],
        "height": views.DEFAULT_RASTER[1],
        "pixel_size_mm": views.DEFAULT_PIXEL_SIZE_MM,
    },
    "noise": {"blur_sigma_px": echo.DEFAULT_BLUR_SIGMA_PX, "noise_sigma": echo.DEFAULT_NOISE_SIGMA},
    "masks_dir": None,
    "ot": {
        "tau_sq": None,
        "sigma_sq": None,
        "tau_diag_fraction": ot.TAU_DIAG_FRACTION,
        "sigma_diag_fraction": ot.SIGMA_DIAG_FRACTION,
        "max_iter": ot.DEFAULT_MAX_ITER,
        "tol": ot.DEFAULT_TOL,
    },
    "rbf": {"bandwidth_mm": None, "ridge": ot.DEFAULT_RIDGE},
    "grid_dims": None,
    "eval": {"resolution": metrics.DEFAULT_RESOLUTION, "pairs": []},
    "clinical": {
        "lv_labels": None,
        "subsample_rate": metrics.DEFAULT_SUBSAMPLE_RATE,
        "cases": [],
        "volumes": None,
    },
}


def _merge(base: dict, override: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


class PipelineConfig:
    """Validated configuration; ``data`` holds the fully materialized document."""

    def __init__(self, data: dict, base_dir: Path):
        self.data = data
        self.base_dir = Path(base_dir)
        self._check_shapes()

    @classmethod
    def load(cls, path, seed: Optional[int] = None, out: Optional[str] = None) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw, path.parent, seed=seed, out=out)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".", seed=None, out=None) -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        data = _merge(DEFAULTS, raw)
        if seed is not None:
            data["seed"] = seed
        if out is not None:
            data["output_dir"] = str(Path(out).resolve())
        return cls(data, Path(base_dir))

    def __getitem__(self, key):
        return self.data[key]

    def resolve(self, value) -> Optional[Path]:
        """Interpret a path value relative to the config file's directory."""
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    def path(self, key: str) -> Optional[Path]:
        return self.resolve(self.data[key])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir")

    def _check_shapes(self):
        d = self.data
        try:
            seed = int(d["seed"])
        except (TypeError, ValueError):
            raise ConfigError("seed must be an integer") from None
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        j = d["jitter"]
        ranges = list(j["delta_mm"]) + list(j["angles_deg"]) + [j["scale"]]
        if len(j["delta_mm"]) != 3 or len(j["angles_deg"]) != 3:
            raise ConfigError("jitter.delta_mm and jitter.angles_deg need three [lo, hi] ranges")
        for r in ranges:
            if len(r) != 2 or not float(r[0]) <= float(r[1]):
                raise ConfigError(f"jitter range {r} must be [lo, hi] with lo <= hi")
        if not float(j["scale"][0]) > 0:
            raise ConfigError("jitter.scale must stay positive")
        r = d["raster"]
        if int(r["width"]) < 1 or int(r["height"]) < 1 or not float(r["pixel_size_mm"]) > 0:
            raise ConfigError("raster dimensions and pixel size must be positive")
        n = d["noise"]
        if float(n["blur_sigma_px"]) < 0 or float(n["noise_sigma"]) < 0:
            raise ConfigError("noise parameters must be non-negative")
        if d["grid_dims"] is not None and (len(d["grid_dims"]) != 3 or min(d["grid_dims"]) < 1):
            raise ConfigError("grid_dims must be three positive integers")
        if int(d["eval"]["resolution"]) < 1:
            raise ConfigError("eval.resolution must be positive")
        rate = float(d["clinical"]["subsample_rate"])
        if not 0 < rate <= 1:
            raise ConfigError("clinical.subsample_rate must be in (0, 1]")

    def require_paths(self, *keys: str) -> None:
        """Fail unless every named path is configured and exists."""
        for key in keys:
            p = self.path(key)
            if p is None:
                raise ConfigError(f"config key {key!r} is required for this command")
            if not p.exists():
                raise ConfigError(f"{key} path does not exist: {p}")

    def load_views(self, cloud=None) -> list:
        chosen = self.data["views"]
        try:
            if chosen == "builtin":
                labels = self.data["atria_labels"]
                if cloud is not None and labels is not None and cloud.labels is not None:
                    return views.builtin_views(cloud, labels)
                return views.builtin_views()
            if isinstance(chosen, str):
                p = self.resolve(chosen)
                if not p.exists():
                    raise ConfigError(f"view file does not exist: {p}")
                return views.load_views(p)
            return [views.ViewDefinition.from_json(o) for o in chosen]
        except ConfigError:
            raise
        except (EchoMeshError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad view definitions: {exc}") from None

    def snapshot(self) -> dict:
        return copy.deepcopy(self.data)
