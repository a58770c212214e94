"""End-to-end stages over a single output directory.

Layout below ``root``::

    data/                      shapes dataset (train/val split in the manifest)
    teacher/teacher.zsqd       full-precision detector, metrics.csv
    calib/<name>/              calibration sets in the dataset format
    qat/<name>/student.zsqd    quantized students, metrics.csv
    eval/<name>/eval.csv       per-class AP tables
    baselines/results.csv      comparison grid

Every stage writes a ``run.json`` with the command, the full config, the seed
and content hashes of its inputs and outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, dataset_from_arrays, generate_dataset, load_dataset, tree_digest, write_dataset
from .detector import build_model
from .distill import run_qat
from .metrics import evaluate
from .persistence import CheckpointError, load_checkpoint_with_meta, save_checkpoint
from .synthesis import generate_calibration_set
from .train import train_detector

log = logging.getLogger(__name__)

TEACHER_COLUMNS = ("epoch", "loss", "category", "box", "conf", "mAP", "mAP50")
BASELINE_COLUMNS = ("method", "info", "distri", "bits", "mAP", "mAP50", "seed", "detect", "status")
# method -> (synthesis kind, distribution mode, uses real label info, uses count distribution)
METHODS = {
    "real": ("real", "in", True, True),
    "adaptive": ("adaptive", "out", False, False),
    "multisample-in": ("multisample", "in", False, True),
    "multisample-out": ("multisample", "out", False, False),
    "tile-in": ("tile", "in", False, True),
    "tile-out": ("tile", "out", False, False),
    "gaussian": ("gaussian", "out", False, False),
}


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: str, path, command: str):
        super().__init__(f"{what} not found at {path}; run `zsqdet {command}` first")


class Divergence(RuntimeError):
    pass


def parse_bits(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"w(\d+)a(\d+)", text.strip().lower())
    if not m:
        raise ValueError(f"bit setting must look like w4a8, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _digest(path: Path) -> str:
    return tree_digest(path) if path.is_dir() else file_digest(path)


def write_run_record(directory, command: str, cfg: ExperimentConfig, inputs: dict, outputs: dict,
                     extra: dict | None = None) -> dict:
    record = {
        "command": command,
        "seed": cfg.seed,
        "config": json.loads(cfg.canonical_json()),
        "config_hash": cfg.digest(),
        "inputs": {k: _digest(Path(v)) for k, v in sorted(inputs.items())},
        "outputs": {k: _digest(Path(v)) for k, v in sorted(outputs.items())},
        **(extra or {}),
    }
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r[c] for c in columns])
    return buf.getvalue()


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def teacher(self) -> Path:
        return self.root / "teacher" / "teacher.zsqd"

    def calib(self, name: str) -> Path:
        return self.root / "calib" / name

    def qat(self, name: str) -> Path:
        return self.root / "qat" / name

    # -- loaders that name the missing upstream step -----------------------
    def load_data(self) -> Dataset:
        if not (self.data / "manifest.json").exists():
            raise MissingArtifact("dataset", self.data, "gen-data")
        return load_dataset(self.data)

    def load_teacher(self):
        if not self.teacher.exists():
            raise MissingArtifact("teacher checkpoint", self.teacher, "train-teacher")
        return load_checkpoint_with_meta(self.teacher)

    def load_calib(self, name: str) -> Dataset:
        path = self.calib(name)
        if not (path / "manifest.json").exists():
            raise MissingArtifact(f"calibration set {name!r}", path, "synthesize")
        return load_dataset(path)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def gen_data(cfg: ExperimentConfig, root) -> Dataset:
    ws = Workspace(root)
    ds = generate_dataset(cfg.data, ws.data)
    write_run_record(ws.data, "gen-data", cfg, {}, {"images": ws.data / "images",
                                                    "labels": ws.data / "labels"})
    return ds


def train_teacher(cfg: ExperimentConfig, root, progress=None):
    ws = Workspace(root)
    ds = ws.load_data()
    spec = cfg.data
    model = build_model(cfg.model.channels, spec.num_classes, spec.image_size, cfg.model.seed)
    history = train_detector(model, ds.split("train"), cfg.teacher, ds.split("val"), progress)
    res = evaluate(model, ds.split("val"), cfg.eval.conf_thresh, cfg.eval.nms_iou)
    meta = {"seed": cfg.seed, "config_hash": cfg.digest(), "epoch": cfg.teacher.epochs,
            "metrics": {"mAP": res.map_5095, "mAP50": res.map_50}, "role": "teacher"}
    save_checkpoint(model, ws.teacher, meta)
    out = ws.teacher.parent
    (out / "metrics.csv").write_text(rows_to_csv(history, TEACHER_COLUMNS))
    write_run_record(out, "train-teacher", cfg, {"data": ws.data},
                     {"teacher": ws.teacher, "metrics": out / "metrics.csv"})
    return model, history, res


def calib_name(method: str, count: int, seed: int) -> str:
    return f"{method}-n{count}-s{seed}"


def synthesize(cfg: ExperimentConfig, root, method: str = "adaptive", count: int = 256,
               name: str | None = None, progress=None) -> Dataset:
    """Build a calibration set with one of the ``METHODS`` and write it under ``calib/``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    ws = Workspace(root)
    teacher, _ = ws.load_teacher()
    kind, distri, _, _ = METHODS[method]
    histogram, real_labels = None, None
    inputs = {"teacher": ws.teacher}
    if distri == "in":
        # only the label-count histogram (or, for "real", the labels) leave the dataset
        train = ws.load_data().split("train")
        histogram = train.count_histogram()
        real_labels = train.labels
        inputs["data"] = ws.data
    b = cfg.baselines
    calib = generate_calibration_set(teacher, cfg.synthesis, count, kind, distri, histogram,
                                     real_labels, b.multisample_out_count, b.tile_out_k, progress)
    manifest = {
        "source": kind,
        "method": method,
        "num_classes": teacher.num_classes,
        "confidences": [[lb.confidence for lb in lbs] for lbs in calib.labels],
        "prior_initial": calib.prior_initial,
        "prior_final": calib.prior_final,
        "seed": cfg.synthesis.seed,
    }
    ds = dataset_from_arrays(calib.images, calib.labels, manifest)
    path = ws.calib(name or calib_name(method, count, cfg.synthesis.seed))
    write_dataset(path, ds.pixels, ds.labels, manifest)
    write_run_record(path, "synthesize", cfg, inputs,
                     {"images": path / "images", "labels": path / "labels"},
                     {"method": method, "count": count})
    return load_dataset(path)


def run_student(cfg: ExperimentConfig, teacher, calib: Dataset, val: Dataset | None, progress=None):
    eval_kw = {"conf_thresh": cfg.eval.conf_thresh, "nms_iou": cfg.eval.nms_iou}
    return run_qat(teacher, calib.images(), calib.labels, cfg.qat, val, eval_kw, progress)


def qat(cfg: ExperimentConfig, root, calib: str, name: str | None = None, progress=None):
    """Quantize the teacher with the named calibration set; raises ``Divergence`` on NaN."""
    ws = Workspace(root)
    teacher, _ = ws.load_teacher()
    cal = ws.load_calib(calib)
    val = ws.load_data().split("val")
    result = run_student(cfg, teacher, cal, val, progress)
    name = name or f"{calib}-w{cfg.qat.b_w}a{cfg.qat.b_a}"
    out = ws.qat(name)
    best = result.log[result.best_epoch]
    meta = {"seed": cfg.seed, "config_hash": cfg.digest(), "epoch": result.best_epoch,
            "metrics": {"mAP": best["mAP"], "mAP50": best["mAP50"]}, "role": "student",
            "calibration": calib, "diverged": result.diverged}
    save_checkpoint(result.student, out / "student.zsqd", meta)
    (out / "metrics.csv").write_text(result.csv())
    write_run_record(out, "qat", cfg, {"teacher": ws.teacher, "calib": ws.calib(calib)},
                     {"student": out / "student.zsqd"}, {"diverged": result.diverged})
    if result.diverged:
        raise Divergence(result.message)
    return result


def eval_checkpoint(cfg: ExperimentConfig, root, checkpoint, force: bool = False, name: str | None = None):
    ws = Workspace(root)
    model, meta = load_checkpoint_with_meta(checkpoint)
    stored = meta.get("config_hash")
    if stored is not None and stored != cfg.digest() and not force:
        raise CheckpointError(f"{checkpoint}: trained under config {stored[:12]}, current config is "
                              f"{cfg.digest()[:12]}; pass --force to evaluate anyway")
    val = ws.load_data().split("val")
    res = evaluate(model, val, cfg.eval.conf_thresh, cfg.eval.nms_iou)
    out = ws.root / "eval" / (name or Path(checkpoint).stem)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(res.to_csv())
    (out / "summary.txt").write_text(res.summary(val.manifest.get("class_names")) + "\n")
    write_run_record(out, "eval", cfg, {"checkpoint": checkpoint, "data": ws.data},
                     {"eval": out / "eval.csv"}, {"forced": bool(force and stored != cfg.digest())})
    return res


def _cell_cfg(cfg: ExperimentConfig, bits: str, seed: int, detect: bool) -> ExperimentConfig:
    b_w, b_a = parse_bits(bits)
    qat_cfg = cfg.qat.model_copy(update={"b_w": b_w, "b_a": b_a, "seed": seed,
                                         "beta_detect": cfg.qat.beta_detect if detect else 0.0})
    syn = cfg.synthesis.model_copy(update={"seed": seed})
    return cfg.model_copy(update={"qat": qat_cfg, "synthesis": syn, "seed": seed})


def compare_baselines(cfg: ExperimentConfig, root, progress=None) -> list[dict]:
    """Run the method x L_detect x bits x seed grid; failures are recorded per cell."""
    ws = Workspace(root)
    teacher, _ = ws.load_teacher()
    val = ws.load_data().split("val")
    b = cfg.baselines
    rows = []
    for seed in b.seeds:
        for method in b.methods:
            kind, distri, info, uses_distri = METHODS[method]
            cell_base = _cell_cfg(cfg, b.bits[0], seed, True)
            name = calib_name(method, b.count, seed)
            try:
                cal = (ws.load_calib(name) if (ws.calib(name) / "manifest.json").exists()
                       else synthesize(cell_base, root, method, b.count, name))
            except Exception as exc:  # keep the grid going
                log.error("synthesis failed for %s seed %d: %s", method, seed, exc)
                cal = None
            for bits in b.bits:
                for detect in b.detect_arms:
                    row = {"method": method, "info": "yes" if info else "no",
                           "distri": "yes" if uses_distri else "no", "bits": bits.upper(),
                           "seed": seed, "detect": "yes" if detect else "no"}
                    if cal is None:
                        row.update(mAP="-", mAP50="-", status="synthesis-failed")
                        rows.append(row)
                        continue
                    cell = _cell_cfg(cfg, bits, seed, detect)
                    try:
                        res = run_student(cell, teacher, cal, val)
                    except Exception as exc:
                        log.error("QAT failed for %s: %s", row, exc)
                        row.update(mAP="-", mAP50="-", status=f"error: {exc}")
                        rows.append(row)
                        continue
                    if res.diverged:
                        row.update(mAP="-", mAP50="-", status="diverged")
                    else:
                        best = res.log[res.best_epoch]
                        row.update(mAP=f"{best['mAP']:.4f}", mAP50=f"{best['mAP50']:.4f}", status="ok")
                    rows.append(row)
                    if progress:
                        progress(row)
    out = ws.root / "baselines"
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(rows_to_csv(rows, BASELINE_COLUMNS))
    write_run_record(out, "compare-baselines", cfg, {"teacher": ws.teacher},
                     {"results": out / "results.csv"})
    return rows


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [["" if v is None else str(v) for v in r] for r in rows]
    ncol = max(len(r) for r in cells)
    cells = [r + [""] * (ncol - len(r)) for r in cells]  # summary rows may be short
    widths = [max(len(r[i]) for r in cells) for i in range(ncol)]
    fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    rule = "-" * len(fmt(cells[0]))
    return "\n".join([rule, fmt(cells[0]), rule, *map(fmt, cells[1:]), rule])


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def report(root) -> str:
    """Plain-text tables for every CSV produced under ``root``."""
    root = Path(root)
    parts = []
    targets = [("Teacher training", root / "teacher" / "metrics.csv")]
    targets += [(f"QAT {p.parent.name}", p) for p in sorted((root / "qat").glob("*/metrics.csv"))]
    targets += [(f"Evaluation {p.parent.name}", p) for p in sorted((root / "eval").glob("*/eval.csv"))]
    targets.append(("Calibration-method comparison", root / "baselines" / "results.csv"))
    for title, path in targets:
        if path.exists():
            header, rows = _read_csv(path)
            parts.append(f"{title} ({path.relative_to(root)})\n{format_table(header, rows)}")
    if not parts:
        raise MissingArtifact("any CSV output", root, "train-teacher")
    return "\n\n".join(parts) + "\n"


def mean_or_nan(values) -> float:
    vals = [float(v) for v in values if v not in ("-", None)]
    return float(np.mean(vals)) if vals else math.nan
