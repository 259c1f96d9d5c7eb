"""Cross-validation, ablation grid, toy data and report files.

Report directory layout::

    out/<scheme>/fold<i>/final.ckpt
    out/<scheme>/fold<i>/loss_log.csv
    out/<scheme>/fold<i>/metrics.csv        id,structure,dice,jaccard,fnr,fpr
    out/<scheme>/fold<i>/metrics_bone.csv   id,rmse,mssim,baseline_rmse
    out/<scheme>/fold<i>/preds/<id>_<task>.png
    out/summary.json
    out/boxplots/<metric>.json
    out/loss_curves/<scheme>_fold<i>.json
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
from PIL import Image

from . import data as dp
from . import metrics as mx
from .errors import ConfigError
from .models import (SCHEMES, TASK_BONE, TASK_SEG, SchemeConfig, build_discriminator,
                     build_generator, count_parameters)
from .trainer import (Checkpoint, TrainConfig, init_state, predict, read_loss_log, split_outputs,
                      train)

log = logging.getLogger(__name__)

ALL_SCHEMES = tuple(SCHEMES)
SMOOTHING_WINDOW = 100
STRUCTURE_NAMES = {c: dp.CLASS_NAMES[c] for c in mx.STRUCTURES}
SEG_METRICS = ("dice", "jaccard", "fnr", "fpr")
BONE_METRICS = ("rmse", "mssim", "baseline_rmse")
WALL_CLOCK_KEY = "wall_clock_seconds"

STATS_SCHEMA = {
    "type": "object",
    "required": ["mean", "std", "median", "q25", "q75", "whisker_low", "whisker_high", "outliers", "n"],
    "properties": {
        "mean": {"type": "number"}, "std": {"type": "number"}, "median": {"type": "number"},
        "q25": {"type": "number"}, "q75": {"type": "number"},
        "whisker_low": {"type": "number"}, "whisker_high": {"type": "number"},
        "outliers": {"type": "array", "items": {"type": "number"}},
        "n": {"type": "integer", "minimum": 1},
    },
}

BOXPLOT_SCHEMA = {
    "type": "object",
    "required": ["metric", "groups"],
    "properties": {
        "metric": {"type": "string"},
        "groups": {"type": "object", "additionalProperties": STATS_SCHEMA},
    },
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["run", "split", "schemes", "pvalues", "table"],
    "properties": {
        "split": {"type": "object", "required": ["k", "assignments", "fingerprint"]},
        "schemes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["tasks", "parameters", "folds", "metrics"],
                "properties": {
                    "parameters": {"type": "integer"},
                    "folds": {"type": "array"},
                    "metrics": {"type": "object", "additionalProperties": STATS_SCHEMA},
                },
            },
        },
        "pvalues": {"type": "object"},
        "table": {"type": "array"},
    },
}


# --------------------------------------------------------------------------- toy data

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def toy_arrays(size: int, rng: np.random.Generator):
    """One synthetic chest-like triple: (input, label map, suppressed), 8-bit."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    j = lambda scale: rng.uniform(-scale, scale) * size  # noqa: E731
    labels = np.zeros((size, size), np.uint8)
    # the patient's left lung is on the image right
    right = _ellipse(yy, xx, 0.47 * size + j(0.03), 0.30 * size + j(0.03),
                     0.30 * size * rng.uniform(0.9, 1.1), 0.13 * size * rng.uniform(0.9, 1.1))
    left = _ellipse(yy, xx, 0.47 * size + j(0.03), 0.70 * size + j(0.03),
                    0.30 * size * rng.uniform(0.9, 1.1), 0.13 * size * rng.uniform(0.9, 1.1))
    heart = _ellipse(yy, xx, 0.64 * size + j(0.03), 0.55 * size + j(0.03),
                     0.13 * size * rng.uniform(0.9, 1.1), 0.15 * size * rng.uniform(0.9, 1.1))
    labels[right] = dp.RIGHT_LUNG
    labels[left] = dp.LEFT_LUNG
    labels[heart] = dp.HEART

    base = np.choose(labels, [120.0, 55.0, 55.0, 185.0])
    base += rng.normal(0.0, 4.0, size=base.shape)
    period = size / rng.uniform(7.0, 9.0)
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.15, 0.15)
    wave = np.sin(2 * np.pi * (yy + tilt * (xx - size / 2)) / period + phase)
    stripes = (wave > 0.55) & (labels != dp.BACKGROUND)
    suppressed = np.clip(np.rint(base), 0, 255).astype(np.uint8)
    x = suppressed.copy()
    x[stripes] = np.clip(suppressed[stripes].astype(np.int16) + 45, 0, 255).astype(np.uint8)
    return x, labels, suppressed, stripes


def make_toy_dataset(n_subjects: int, size: int, seed: int, out) -> dp.DatasetIndex:
    """Write a deterministic synthetic paired dataset in the standard layout."""
    if n_subjects < 4:
        raise ConfigError("need at least 4 subjects")
    if size < 64:
        raise ConfigError("size must be >= 64")
    out = Path(out)
    for d in dp.SUBDIRS:
        (out / d).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_subjects):
        rng = np.random.default_rng([seed, i])
        x, labels, supp, _ = toy_arrays(size, rng)
        sid = f"toy{i:03d}"
        Image.fromarray(x, "L").save(out / "images" / f"{sid}.png")
        Image.fromarray(dp.encode_labels(labels), "RGB").save(out / "masks" / f"{sid}.png")
        Image.fromarray(supp, "L").save(out / "suppressed" / f"{sid}.png")
        rows.append((sid, f"S{i:03d}"))
    with open(out / "subjects.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "subject"))
        w.writerows(rows)
    return dp.load_manifest(out)


# --------------------------------------------------------------------------- runs

@dataclass
class RunSpec:
    schemes: Sequence[str]
    data: Path
    out: Path | None = None
    k: int = 5
    loso: bool = False
    image_size: int = 512
    base_width: int = 64
    seed: int = 0
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    save_predictions: bool = True

    def __post_init__(self):
        self.schemes = list(self.schemes)
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unknown schemes {bad}")
        if not self.loso and self.k < 2:
            raise ConfigError("k must be >= 2 (or use leave-one-subject-out)")
        self.data = Path(self.data)
        if self.out is not None:
            self.out = Path(self.out)
        allowed = set(TrainConfig.__dataclass_fields__) - {"scheme", "seed", "checkpoint_dir"}
        unknown = set(self.train) - allowed
        if unknown:
            raise ConfigError(f"unknown training overrides {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"schemes": list(self.schemes), "data": str(self.data), "k": self.k,
                "loso": self.loso, "image_size": self.image_size, "base_width": self.base_width,
                "seed": self.seed, "train": dict(sorted(self.train.items()))}

    @classmethod
    def from_dict(cls, d: dict, **kw) -> "RunSpec":
        allowed = {"schemes", "data", "out", "k", "loso", "image_size", "base_width", "seed",
                   "train", "save_predictions"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown run config keys {sorted(unknown)}")
        merged = {**d, **{k: v for k, v in kw.items() if v is not None}}
        return cls(**merged)


@dataclass
class MetricsRecord:
    id: str
    subject: str
    scheme: str
    fold: int
    seg: dict[int, dict[str, float]] | None = None
    rmse: float | None = None
    mssim: float | None = None
    baseline_rmse: float | None = None

    def value(self, metric: str):
        """Metric lookup by summary key, e.g. ``dice/left_lung``, ``dice/average``, ``rmse``."""
        if "/" in metric:
            name, where = metric.split("/")
            if self.seg is None:
                return None
            if where == "average":
                vals = [self.seg[c][name] for c in mx.STRUCTURES]
                vals = [v for v in vals if not math.isnan(v)]
                return float(np.mean(vals)) if vals else math.nan
            c = next(c for c, n in STRUCTURE_NAMES.items() if n == where)
            return self.seg[c][name]
        return getattr(self, metric)


@dataclass
class FoldRun:
    scheme: str
    fold: int
    test_subjects: list[str]
    train_subjects: list[str]
    epochs: int
    steps: int
    stopped_early: bool
    final_l1: float
    wall_clock_seconds: float


@dataclass
class Report:
    spec: dict
    split: dp.FoldSplit
    records: list[MetricsRecord] = field(default_factory=list)
    folds: list[FoldRun] = field(default_factory=list)
    parameters: dict[str, int] = field(default_factory=dict)

    @property
    def schemes(self) -> list[str]:
        return list(self.parameters)

    def records_for(self, scheme: str) -> list[MetricsRecord]:
        return sorted((r for r in self.records if r.scheme == scheme), key=lambda r: r.id)

    def metric_names(self, scheme: str) -> list[str]:
        tasks = SCHEMES[scheme][0]
        names = []
        if TASK_SEG in tasks:
            for m in SEG_METRICS:
                names += [f"{m}/{n}" for n in STRUCTURE_NAMES.values()] + [f"{m}/average"]
        if TASK_BONE in tasks:
            names += list(BONE_METRICS)
        return names

    def values(self, scheme: str, metric: str) -> dict[str, float]:
        out = {}
        for r in self.records_for(scheme):
            v = r.value(metric)
            if v is not None and not (isinstance(v, float) and math.isnan(v)):
                out[r.id] = float(v)
        return out

    def summaries(self) -> dict[str, dict[str, mx.SummaryStats]]:
        return {s: {m: mx.summary_stats(list(self.values(s, m).values()))
                    for m in self.metric_names(s) if self.values(s, m)}
                for s in self.schemes}

    def pvalues(self) -> dict[str, dict[str, dict]]:
        """Paired t-tests between every scheme pair sharing a metric (paired by sample id)."""
        out: dict[str, dict[str, dict]] = {}
        for a, b in itertools.combinations(self.schemes, 2):
            shared = sorted(set(self.metric_names(a)) & set(self.metric_names(b)))
            for m in shared:
                va, vb = self.values(a, m), self.values(b, m)
                ids = sorted(set(va) & set(vb))
                if len(ids) < 2:
                    continue
                t, p = mx.paired_ttest([va[i] for i in ids], [vb[i] for i in ids])
                out.setdefault(m, {})[f"{a}|{b}"] = {"t": _num(t), "p": _num(p), "n": len(ids)}
        return out

    def table(self, summaries=None) -> list[dict]:
        """Comparison rows: task x metric x scheme, mean and std of the per-image scores."""
        summaries = summaries or self.summaries()
        rows = []
        for task, metric, label in ((TASK_SEG, "dice/average", "Average Dice"),
                                    (TASK_SEG, "fnr/average", "Average FNR"),
                                    (TASK_BONE, "mssim", "Average MSSIM"),
                                    (TASK_BONE, "rmse", "Average RMSE")):
            row = {"task": task, "metric": label, "values": {}}
            for s in self.schemes:
                st = summaries[s].get(metric)
                if st is not None:
                    row["values"][s] = {"mean": st.mean, "std": st.std}
            rows.append(row)
        rows.append({"task": None, "metric": "No. Parameters", "values": dict(self.parameters)})
        epochs = {s: max(f.epochs for f in self.folds if f.scheme == s) for s in self.schemes}
        rows.append({"task": None, "metric": "Epochs", "values": epochs})
        return rows


def _num(x: float):
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _gray8(img_norm: np.ndarray) -> np.ndarray:
    return dp.denormalize(np.asarray(img_norm, dtype=np.float64).mean(axis=-1))


def evaluate_sample(raw_out: np.ndarray, sample: dp.PairedSample, tasks: Sequence[str]) -> dict:
    """Scores of one normalized generator output against the sample's targets."""
    res = {}
    for i, t in enumerate(tasks):
        part = raw_out[..., 3 * i:3 * i + 3]
        if t == TASK_SEG:
            res["seg"] = mx.segmentation_scores(dp.label_map(part), dp.label_map(sample.Y1))
        else:
            pred, target = _gray8(part), _gray8(sample.Y2)
            res["rmse"] = mx.rmse(pred, target)
            res["mssim"] = mx.mssim(pred, target)
    return res


def evaluate_checkpoint(ckpt: Checkpoint, samples: Sequence[dp.PairedSample], scheme: str = "",
                        fold: int = -1) -> list[MetricsRecord]:
    tasks = ckpt.scheme.tasks
    return [MetricsRecord(s.id, s.subject, scheme or ckpt.scheme.scheme, fold,
                          **evaluate_sample(predict(ckpt, s.X), s, tasks)) for s in samples]


class LeakageError(AssertionError):
    pass


def _check_no_leak(train_set, test_set):
    shared = {s.subject for s in train_set} & {s.subject for s in test_set}
    if shared:
        raise LeakageError(f"subjects in both train and test: {sorted(shared)}")
    if any(s.origin != "original" for s in test_set):
        raise LeakageError("augmented sample in the test set")


def _triptych(x_norm, pred, target) -> np.ndarray:
    def rgb(a):
        return a if a.ndim == 3 else np.repeat(a[..., None], 3, axis=-1)
    return np.concatenate([rgb(_gray8(x_norm)), rgb(pred), rgb(target)], axis=1)


def _write_predictions(ckpt: Checkpoint, samples, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    tasks = ckpt.scheme.tasks
    for s in samples:
        outs = split_outputs(predict(ckpt, s.X), tasks)
        for t, img in zip(tasks, outs):
            target = dp.denormalize(s.Y1) if t == TASK_SEG else _gray8(s.Y2)
            Image.fromarray(_triptych(s.X, img, target), "RGB").save(outdir / f"{s.id}_{t}.png")


def run_cross_validation(spec: RunSpec) -> Report:
    """Train per scheme and fold on augmented in-fold subjects; score held-out originals."""
    index = dp.load_manifest(spec.data)
    k = len(index.subjects()) if spec.loso else spec.k
    split = dp.subject_kfold(index, k, spec.seed)
    originals = dp.load_samples(index, size=spec.image_size)
    report = Report(spec.to_dict(), split)

    for scheme in spec.schemes:
        scfg = SchemeConfig(scheme, spec.image_size, spec.base_width)
        report.parameters[scheme] = count_parameters(build_generator(scfg), build_discriminator(scfg))
        baseline = None
        for fold in range(k):
            test_subj = split.test_subjects(fold)
            train_subj = split.train_subjects(fold)
            test_set = [s for s in originals if s.subject in set(test_subj)]
            train_set = dp.augment_dataset([s for s in originals if s.subject in set(train_subj)])
            _check_no_leak(train_set, test_set)

            fold_dir = spec.out / scheme / f"fold{fold}" if spec.out else None
            cfg = TrainConfig(scheme=scfg, seed=spec.seed, checkpoint_dir=fold_dir, **spec.train)
            t0 = time.perf_counter()
            try:
                result = train(cfg, train_set, None, split.fingerprint())
            except Exception as exc:
                raise type(exc)(f"[{scheme} fold {fold}] {exc}") from exc
            elapsed = time.perf_counter() - t0

            records = evaluate_checkpoint(result.checkpoint, test_set, scheme, fold)
            if TASK_BONE in scfg.tasks:
                # untrained generator with the same seed, as a reference point
                if baseline is None:
                    baseline = Checkpoint.from_state(init_state(cfg))
                for r, s in zip(records, test_set):
                    r.baseline_rmse = evaluate_sample(predict(baseline, s.X), s, scfg.tasks)["rmse"]
            report.records.extend(records)
            report.folds.append(FoldRun(scheme, fold, test_subj, train_subj, result.epochs,
                                        result.steps, result.stopped_early,
                                        result.epoch_l1[-1], elapsed))
            if fold_dir is not None:
                write_fold_metrics(records, fold_dir)
                if spec.save_predictions:
                    _write_predictions(result.checkpoint, test_set, fold_dir / "preds")
            log.info("%s fold %d: %d epochs, %.1fs", scheme, fold, result.epochs, elapsed)
    return report


def run_ablation(spec: RunSpec) -> Report:
    """All requested schemes on one shared subject split (one seed)."""
    if len(set(spec.schemes)) != len(spec.schemes):
        raise ConfigError("duplicate schemes in ablation")
    return run_cross_validation(spec)


# --------------------------------------------------------------------------- files

def write_fold_metrics(records: Sequence[MetricsRecord], fold_dir: Path):
    fold_dir.mkdir(parents=True, exist_ok=True)
    seg = [r for r in records if r.seg is not None]
    bone = [r for r in records if r.rmse is not None]
    if seg:
        with open(fold_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id", "structure") + SEG_METRICS)
            for r in seg:
                for c in mx.STRUCTURES:
                    w.writerow([r.id, STRUCTURE_NAMES[c]] + [repr(float(r.seg[c][m])) for m in SEG_METRICS])
    if bone:
        with open(fold_dir / "metrics_bone.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id",) + BONE_METRICS)
            for r in bone:
                w.writerow([r.id] + [repr(float(v)) if v is not None else ""
                                     for v in (r.rmse, r.mssim, r.baseline_rmse)])


def read_fold_metrics(fold_dir: Path, scheme: str, fold: int, subjects: dict[str, str]) -> list[MetricsRecord]:
    recs: dict[str, MetricsRecord] = {}

    def rec(i):
        if i not in recs:
            recs[i] = MetricsRecord(i, subjects.get(i, ""), scheme, fold)
        return recs[i]

    by_name = {n: c for c, n in STRUCTURE_NAMES.items()}
    p = fold_dir / "metrics.csv"
    if p.exists():
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                r = rec(row["id"])
                r.seg = r.seg or {}
                r.seg[by_name[row["structure"]]] = {m: float(row[m]) for m in SEG_METRICS}
    p = fold_dir / "metrics_bone.csv"
    if p.exists():
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                r = rec(row["id"])
                r.rmse, r.mssim = float(row["rmse"]), float(row["mssim"])
                r.baseline_rmse = float(row["baseline_rmse"]) if row.get("baseline_rmse") else None
    return [recs[i] for i in sorted(recs)]


def moving_average(values: Sequence[float], window: int = SMOOTHING_WINDOW) -> list[float]:
    """Trailing mean over at most ``window`` previous values (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return []
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return list((c[idx] - c[lo]) / (idx - lo))


def summary_dict(report: Report) -> dict:
    summaries = report.summaries()
    schemes = {}
    for s in report.schemes:
        schemes[s] = {
            "tasks": list(SCHEMES[s][0]),
            "parameters": report.parameters[s],
            "folds": [{"fold": f.fold, "test_subjects": f.test_subjects, "epochs": f.epochs,
                       "steps": f.steps, "stopped_early": f.stopped_early, "final_l1": f.final_l1,
                       WALL_CLOCK_KEY: f.wall_clock_seconds}
                      for f in report.folds if f.scheme == s],
            "metrics": {m: st.to_dict() for m, st in summaries[s].items()},
        }
    split = report.split.to_dict()
    split["fingerprint"] = report.split.fingerprint()
    return {"run": report.spec, "split": split, "schemes": schemes,
            "pvalues": report.pvalues(), "table": report.table(summaries)}


def write_report(report: Report, out) -> list[Path]:
    """Emit summary JSON, box-plot data, smoothed loss curves and per-fold metrics."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in report.schemes:
        for f in (f for f in report.folds if f.scheme == s):
            fold_dir = out / s / f"fold{f.fold}"
            recs = [r for r in report.records if r.scheme == s and r.fold == f.fold]
            write_fold_metrics(recs, fold_dir)

    summary = summary_dict(report)
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    p = out / "summary.json"
    p.write_text(json.dumps(summary, indent=2, sort_keys=True))
    written.append(p)

    bdir = out / "boxplots"
    bdir.mkdir(exist_ok=True)
    metrics = sorted({m for s in report.schemes for m in summary["schemes"][s]["metrics"]})
    for m in metrics:
        doc = {"metric": m, "groups": {s: summary["schemes"][s]["metrics"][m]
                                       for s in report.schemes if m in summary["schemes"][s]["metrics"]}}
        jsonschema.validate(doc, BOXPLOT_SCHEMA)
        p = bdir / f"{m.replace('/', '_')}.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True))
        written.append(p)

    cdir = out / "loss_curves"
    for f in report.folds:
        log_path = out / f.scheme / f"fold{f.fold}" / "loss_log.csv"
        if not log_path.exists():
            continue
        rows = read_loss_log(log_path)
        cdir.mkdir(exist_ok=True)
        doc = {"scheme": f.scheme, "fold": f.fold, "window": SMOOTHING_WINDOW,
               "step": [r.step for r in rows],
               "loss_gan": moving_average([r.loss_gan for r in rows]),
               "loss_l1": moving_average([r.loss_l1 for r in rows]),
               "loss_disc": moving_average([r.loss_disc for r in rows])}
        p = cdir / f"{f.scheme}_fold{f.fold}.json"
        p.write_text(json.dumps(doc))
        written.append(p)
    return written


def load_report(out) -> Report:
    """Rebuild a report from ``summary.json`` and the per-fold metric CSVs."""
    out = Path(out)
    summary = json.loads((out / "summary.json").read_text())
    split = dp.FoldSplit(summary["split"]["k"], summary["split"]["assignments"])
    report = Report(summary["run"], split)
    # the JSON keys are sorted; the run spec keeps the original scheme order
    order = [s for s in summary["run"].get("schemes", []) if s in summary["schemes"]]
    order += sorted(set(summary["schemes"]) - set(order))
    for s in order:
        info = summary["schemes"][s]
        report.parameters[s] = info["parameters"]
        for f in info["folds"]:
            test = f["test_subjects"]
            report.folds.append(FoldRun(s, f["fold"], test, split.train_subjects(f["fold"]),
                                        f["epochs"], f["steps"], f["stopped_early"],
                                        f["final_l1"], f.get(WALL_CLOCK_KEY, 0.0)))
            report.records.extend(read_fold_metrics(out / s / f"fold{f['fold']}", s, f["fold"], {}))
    return report


def strip_wall_clock(obj):
    """Copy of a summary document without the timing fields."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if k != WALL_CLOCK_KEY}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj
