"""Batch commands: slice, pseudo, deform, eval, clinical.

Every command writes ``<output_dir>/<command>_manifest.json`` holding the
materialized config, per-item seeds and status, and a SHA-256 checksum of
each output file. Items are keyed by a stable name, so neither worker count
nor completion order changes any output byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig
from .echo import NoiseParams, pseudo_image, save_gray
from .errors import EchoMeshError, UndefinedCorrelation
from .fusion import grid_from_function, write_grid
from .geometry import SimilarityTransform, apply_transform, read_cloud
from .metrics import compare_clouds, ejection_fraction, lv_volume, mse, pearson, read_patients
from .ot import (OTParams, displacement, fit_rbf_field, solve_assignment, write_field,
                 write_samples)
from .seeding import generator, item_seed
from .views import load_mask, rasterize, save_mask, slice_cloud

log = logging.getLogger("echomesh")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ITEM_FAILURE = 3


@dataclass
class RunResult:
    command: str
    items: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return sorted(k for k, v in self.items.items() if v.get("status") == "failed")

    @property
    def exit_code(self) -> int:
        return EXIT_ITEM_FAILURE if self.failed else EXIT_OK


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_items(keys, fn: Callable, jobs: int) -> dict:
    """Apply ``fn(key) -> record`` to every key; failures become records."""

    def guarded(key):
        try:
            return fn(key)
        except (EchoMeshError, OSError, ValueError, ArithmeticError) as exc:
            log.warning("item %s failed: %s", key, exc)
            return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    keys = list(keys)
    if jobs <= 1:
        records = [guarded(k) for k in keys]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(guarded, keys))
    return dict(zip(keys, records))


def _finish(cfg: PipelineConfig, result: RunResult) -> RunResult:
    out = cfg.output_dir
    outputs = {}
    for rel in sorted(set(result.outputs)):
        outputs[rel] = sha256(out / rel)
    manifest = {
        "tool": "echomesh",
        "version": __version__,
        "command": result.command,
        "config": cfg.snapshot(),
        "items": result.items,
        "outputs": outputs,
        "summary": result.summary,
        "failed_items": result.failed,
    }
    _write_json(manifest, out / f"{result.command}_manifest.json")
    return result


def _corpus(cfg: PipelineConfig) -> list:
    cfg.require_paths("corpus_dir")
    files = sorted(cfg.path("corpus_dir").glob("*.csv"))
    if not files:
        raise ConfigError(f"no .csv meshes in {cfg.path('corpus_dir')}")
    return files


def sample_jitter(cfg: PipelineConfig, seed: int) -> SimilarityTransform:
    """Draw a transform uniformly from the jitter ranges (fixed draw order)."""
    j = cfg["jitter"]
    rng = generator(seed)
    delta = [rng.uniform(float(lo), float(hi)) for lo, hi in j["delta_mm"]]
    angles = [rng.uniform(float(lo), float(hi)) for lo, hi in j["angles_deg"]]
    s_lo, s_hi = j["scale"]
    return SimilarityTransform.from_degrees(delta, angles, rng.uniform(float(s_lo), float(s_hi)))


# -- slice ------------------------------------------------------------------


def cmd_slice(cfg: PipelineConfig, jobs: int = 1) -> RunResult:
    files = {f.stem: f for f in _corpus(cfg)}
    cfg.load_views()  # surface view errors as config errors before any work
    out = cfg.output_dir / "masks"
    out.mkdir(parents=True, exist_ok=True)
    r = cfg["raster"]

    def one(stem):
        seed = item_seed(cfg.seed, stem)
        rec = {"seed": seed, "status": "ok", "outputs": []}
        t = sample_jitter(cfg, seed)
        rec["transform"] = t.to_dict()
        cloud = apply_transform(read_cloud(files[stem]), t)
        dropped = {}
        for view in cfg.load_views(cloud):
            mask = rasterize(slice_cloud(cloud, view), r["width"], r["height"], r["pixel_size_mm"])
            name = f"{stem}_{view.name}.pgm"
            save_mask(mask, out / name)
            rec["outputs"].append(f"masks/{name}")
            dropped[view.name] = mask.dropped
        rec["dropped_points"] = dropped
        return rec

    res = RunResult("slice", _run_items(sorted(files), one, jobs))
    res.outputs = [o for rec in res.items.values() for o in rec.get("outputs", [])]
    return _finish(cfg, res)


# -- pseudo -----------------------------------------------------------------


def cmd_pseudo(cfg: PipelineConfig, jobs: int = 1) -> RunResult:
    masks_dir = cfg.path("masks_dir") or cfg.output_dir / "masks"
    if not masks_dir.is_dir():
        raise ConfigError(f"mask directory does not exist: {masks_dir}")
    views_by_name = {v.name: v for v in cfg.load_views()}
    masks = {p.stem: p for p in sorted(masks_dir.glob("*.pgm"))}
    out = cfg.output_dir / "pseudo"
    out.mkdir(parents=True, exist_ok=True)
    n = cfg["noise"]

    def one(stem):
        seed = item_seed(cfg.seed, stem)
        view_name = stem.rsplit("_", 1)[-1]
        if view_name not in views_by_name:
            raise EchoMeshError(f"mask {stem!r} does not name a configured view")
        params = NoiseParams(float(n["blur_sigma_px"]), float(n["noise_sigma"]), seed)
        img = pseudo_image(load_mask(masks[stem]), views_by_name[view_name], params)
        save_gray(img, out / f"{stem}.pgm")
        return {"seed": seed, "status": "ok", "outputs": [f"pseudo/{stem}.pgm"]}

    res = RunResult("pseudo", _run_items(sorted(masks), one, jobs))
    res.outputs = [o for rec in res.items.values() for o in rec.get("outputs", [])]
    return _finish(cfg, res)


# -- deform -----------------------------------------------------------------


def ot_params_for(cfg: PipelineConfig, *clouds) -> OTParams:
    o = cfg["ot"]
    pts = np.vstack([c.points for c in clouds])
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) or 1.0
    tau_sq = o["tau_sq"] if o["tau_sq"] is not None else (float(o["tau_diag_fraction"]) * diag) ** 2
    sigma_sq = o["sigma_sq"] if o["sigma_sq"] is not None else (float(o["sigma_diag_fraction"]) * diag) ** 2
    return OTParams(float(tau_sq), float(sigma_sq), int(o["max_iter"]), float(o["tol"]))


def cmd_deform(cfg: PipelineConfig, jobs: int = 1) -> RunResult:
    cfg.require_paths("template")
    template = read_cloud(cfg.path("template"))
    files = {f.stem: f for f in _corpus(cfg)}
    out = cfg.output_dir / "deform"
    out.mkdir(parents=True, exist_ok=True)
    rbf = cfg["rbf"]

    def one(stem):
        target = read_cloud(files[stem])
        params = ot_params_for(cfg, template, target)
        plan = solve_assignment(template, target, params)
        samples = displacement(plan, template, target)
        fld = fit_rbf_field(samples, rbf["bandwidth_mm"], float(rbf["ridge"]))
        outputs = [f"deform/{stem}_samples.csv", f"deform/{stem}_field.json",
                   f"deform/{stem}_diagnostics.json"]
        write_samples(samples, out / f"{stem}_samples.csv")
        write_field(fld, out / f"{stem}_field.json")
        _write_json(plan.diagnostics(), out / f"{stem}_diagnostics.json")
        if cfg["grid_dims"] is not None:
            lo = np.minimum(template.points.min(axis=0), target.points.min(axis=0))
            hi = np.maximum(template.points.max(axis=0), target.points.max(axis=0))
            pad = np.maximum((hi - lo) * 0.01, 1e-6)
            write_grid(grid_from_function(fld, cfg["grid_dims"], lo - pad, hi + pad), out / f"{stem}_grid.s2mf")
            outputs.append(f"deform/{stem}_grid.s2mf")
        norms = np.linalg.norm(samples.vectors, axis=1)
        return {"status": "ok", "outputs": outputs, "ot_params": params.to_dict(),
                "bandwidth_mm": fld.bandwidth, "mean_displacement_mm": float(norms.mean()),
                **plan.diagnostics()}

    res = RunResult("deform", _run_items(sorted(files), one, jobs))
    res.outputs = [o for rec in res.items.values() for o in rec.get("outputs", [])]
    res.summary = {"non_converged": sorted(k for k, v in res.items.items()
                                           if v.get("status") == "ok" and not v["converged"])}
    return _finish(cfg, res)


# -- eval -------------------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None else f"{x:.10g}"


def cmd_eval(cfg: PipelineConfig, jobs: int = 1) -> RunResult:
    pairs = cfg["eval"]["pairs"]
    if not pairs:
        raise ConfigError("eval.pairs lists no prediction/target pairs")
    for pair in pairs:
        if len(pair) != 2:
            raise ConfigError(f"eval pair {pair} must be [prediction, target]")
        for p in pair:
            if not cfg.resolve(p).exists():
                raise ConfigError(f"eval input does not exist: {cfg.resolve(p)}")
    resolution = int(cfg["eval"]["resolution"])
    keys = [f"{i:04d}" for i in range(len(pairs))]

    def one(key):
        pred_path, target_path = pairs[int(key)]
        pred, target = read_cloud(cfg.resolve(pred_path)), read_cloud(cfg.resolve(target_path))
        rec = {"status": "ok", "pred": str(pred_path), "target": str(target_path),
               "n_pred": len(pred), "n_target": len(target), "mse": None, "note": ""}
        if len(pred) == len(target):
            rec["mse"] = mse(pred.points, target.points)
        else:
            rec["status"] = "mismatched"
            rec["note"] = "point counts differ; MSE skipped"
        rec["iou"] = compare_clouds(pred, target, resolution)
        return rec

    res = RunResult("eval", _run_items(keys, one, jobs))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = [res.items[k] for k in keys]
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pred", "target", "n_pred", "n_target", "mse", "iou", "note"])
        for rec in rows:
            w.writerow([rec.get("pred", ""), rec.get("target", ""), rec.get("n_pred", ""),
                        rec.get("n_target", ""), _fmt(rec.get("mse")), _fmt(rec.get("iou")),
                        rec.get("note", rec.get("error", ""))])
        agg = {}
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            row = [stat, "", "", ""]
            for col in ("mse", "iou"):
                vals = [r[col] for r in rows if r.get(col) is not None]
                v = float(fn(vals)) if vals else None
                agg[f"{col}_{stat}"] = v
                row.append(_fmt(v))
            w.writerow(row + [""])
    res.summary = agg
    res.outputs = ["metrics.csv"]
    return _finish(cfg, res)


# -- clinical ---------------------------------------------------------------


def _read_volumes(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"patient_id", "edv_mm3", "esv_mm3"} <= set(reader.fieldnames or ()):
            raise ConfigError(f"{path}: volumes file needs patient_id,edv_mm3,esv_mm3")
        return {r["patient_id"].strip(): (float(r["edv_mm3"]), float(r["esv_mm3"])) for r in reader}


def cmd_clinical(cfg: PipelineConfig, jobs: int = 1) -> RunResult:
    cfg.require_paths("patients")
    try:
        patients = read_patients(cfg.path("patients"))
    except (EchoMeshError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    c = cfg["clinical"]
    cases = {}
    for case in c["cases"]:
        try:
            cases[str(case["patient_id"])] = (cfg.resolve(case["ed"]), cfg.resolve(case["es"]))
        except (KeyError, TypeError):
            raise ConfigError("clinical.cases entries need patient_id, ed and es") from None
    if cases and not c["lv_labels"]:
        raise ConfigError("clinical.lv_labels is required to measure volumes from clouds")
    volumes = {}
    if c["volumes"] is not None:
        vp = cfg.resolve(c["volumes"])
        if not vp.exists():
            raise ConfigError(f"volumes file does not exist: {vp}")
        volumes = _read_volumes(vp)
    rate = float(c["subsample_rate"])
    by_id = {p.patient_id: p for p in patients}

    def one(pid):
        rec = {"status": "ok", "glps": by_id[pid].glps}
        if pid in cases:
            ed_path, es_path = cases[pid]
            ed_seed, es_seed = item_seed(cfg.seed, f"{pid}:ed"), item_seed(cfg.seed, f"{pid}:es")
            ed = lv_volume(read_cloud(ed_path), c["lv_labels"], rate, ed_seed)
            es = lv_volume(read_cloud(es_path), c["lv_labels"], rate, es_seed)
            edv, esv = ed.volume, es.volume
            rec.update(source="geometry", seeds={"ed": ed_seed, "es": es_seed},
                       points_used={"ed": ed.point_count_used, "es": es.point_count_used})
        elif pid in volumes:
            edv, esv = volumes[pid]
            rec["source"] = "volumes"
        elif by_id[pid].ef is not None:
            rec.update(source="precomputed", edv=None, esv=None, sv=None, ef_percent=by_id[pid].ef * 100.0)
            return rec
        else:
            raise EchoMeshError(f"patient {pid} has no clouds, volumes or EF")
        sv, efp = ejection_fraction(edv, esv)
        rec.update(edv=edv, esv=esv, sv=sv, ef_percent=efp)
        return rec

    ids = [p.patient_id for p in patients]
    res = RunResult("clinical", _run_items(ids, one, jobs))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with (out / "clinical_report.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "edv_mm3", "esv_mm3", "sv_mm3", "ef_percent"])
        for pid in ids:
            rec = res.items[pid]
            w.writerow([pid] + [_fmt(rec.get(k)) for k in ("edv", "esv", "sv", "ef_percent")])

    usable = [pid for pid in ids
              if res.items[pid]["status"] == "ok" and res.items[pid]["glps"] is not None]
    excluded = [pid for pid in ids if pid not in usable]
    summary = {"n": len(usable), "excluded": excluded, "pcc": None}
    try:
        summary["pcc"] = pearson([res.items[p]["ef_percent"] for p in usable],
                                 [res.items[p]["glps"] for p in usable])
    except UndefinedCorrelation as exc:
        summary["reason"] = str(exc)
    _write_json(summary, out / "clinical_summary.json")
    res.summary = summary
    res.outputs = ["clinical_report.csv", "clinical_summary.json"]
    return _finish(cfg, res)


COMMANDS = {
    "slice": cmd_slice,
    "pseudo": cmd_pseudo,
    "deform": cmd_deform,
    "eval": cmd_eval,
    "clinical": cmd_clinical,
}
