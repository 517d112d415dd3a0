"""ROC/AUC evaluation of a calibrated pipeline across security levels.

The sweep re-derives every defender threshold from its stored benign
percentile table at each security parameter; reliabilities stay fixed
from calibration, so no retraining or recalibration happens inside the
sweep.  True-positive rates are computed over successful attacks only
(adversarial samples the victim actually misclassifies); detecting a
failed attack is vacuous.
"""

import csv
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fusion_mod
from .errors import ValidationError
from .validation import as_image_batch, as_label_array


@dataclass(frozen=True)
class EvalRecord:
    attack: str
    sp: float
    n_def: int
    fp_rate: float
    tp_rate: float


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    auc_scores: dict = field(default_factory=dict)  # (attack, n_def) -> auc
    metadata: dict = field(default_factory=dict)

    def roc_points(self, attack, n_def):
        pts = [(r.fp_rate, r.tp_rate) for r in self.records
               if r.attack == attack and r.n_def == n_def]
        return with_endpoints(sorted(pts))


def with_endpoints(points):
    """ROC points sorted by FP with (0,0) and (1,1) forced."""
    pts = sorted(points)
    if not pts or pts[0] != (0.0, 0.0):
        pts.insert(0, (0.0, 0.0))
    if pts[-1] != (1.0, 1.0):
        pts.append((1.0, 1.0))
    return pts


def auc(points):
    """Trapezoidal area under a sorted ROC.

    Expects at least the two endpoints (0,0) and (1,1); rejects input
    that is not sorted by FP rate.
    """
    pts = [(float(f), float(t)) for f, t in points]
    if len(pts) < 2 or pts[0] != (0.0, 0.0) or pts[-1] != (1.0, 1.0):
        raise ValidationError(
            "ROC must include the endpoints (0,0) and (1,1)")
    fp = np.array([p[0] for p in pts])
    tp = np.array([p[1] for p in pts])
    if np.any(np.diff(fp) < 0) or np.any(np.diff(tp) < 0):
        raise ValidationError("ROC points must be sorted and monotone")
    return float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1]) / 2.0))


def sp_grid(spec="0:100:5"):
    """Parse ``start:stop:step`` (inclusive) or a comma list of values."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValidationError(f"bad sp grid {spec!r}; want start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValidationError(f"bad sp grid {spec!r}")
        values = list(np.arange(start, stop + step / 2, step))
    else:
        values = [float(p) for p in spec.split(",") if p.strip()]
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise ValidationError(f"sp value {v} outside [0, 100]")
    return values


def evaluate(pipeline, benign_images, benign_labels, adv_images,
             adv_labels, grid=None, attack_name="attack"):
    """Sweep SP and record (fp, tp) per point plus the AUC.

    ``adv_labels`` are the *true* labels of the attacked images, used to
    restrict TP to successful attacks.  FP counts rejected benign
    samples.  Fails when either set is empty or no attack succeeded.
    """
    if pipeline.fusion_model is None:
        raise ValidationError("pipeline is not calibrated")
    benign_images = as_image_batch(benign_images)
    adv_images = as_image_batch(adv_images)
    if benign_images.shape[0] == 0 or adv_images.shape[0] == 0:
        raise ValidationError("evaluation sets must be non-empty")
    num_classes = pipeline.victim.output_shape[-1]
    as_label_array(benign_labels, num_classes)
    adv_labels = as_label_array(adv_labels, num_classes)
    grid = list(grid) if grid is not None else sp_grid()

    adv_pred = pipeline.predict(adv_images)
    fooled = adv_pred != adv_labels
    if not fooled.any():
        raise ValidationError(
            "no adversarial sample fools the victim; nothing to detect")

    benign_pred, benign_scores = pipeline.defender_scores(benign_images)
    adv_scores_pred, adv_scores = pipeline.defender_scores(
        adv_images[fooled], adv_pred[fooled])

    report = EvalReport(metadata={
        "attack": attack_name,
        "n_def": pipeline.n_defenders,
        "n_benign": int(benign_images.shape[0]),
        "n_adversarial": int(adv_images.shape[0]),
        "n_successful": int(fooled.sum()),
        "tp_over": "successful attacks only",
        "sp_grid": [float(s) for s in grid],
        "reliabilities": [float(p)
                          for p in pipeline.fusion_model.reliabilities],
    })
    n_def = pipeline.n_defenders
    for sp in sorted(grid):
        fp_rate = _reject_rate(pipeline, benign_scores, benign_pred, sp)
        tp_rate = _reject_rate(pipeline, adv_scores, adv_scores_pred, sp)
        report.records.append(EvalRecord(attack_name, float(sp), n_def,
                                         fp_rate, tp_rate))
    report.auc_scores[(attack_name, n_def)] = auc(
        report.roc_points(attack_name, n_def))
    return report


def _reject_rate(pipeline, scores, predicted, sp):
    flags = pipeline.flags_from_scores(scores, predicted, sp)
    prob = fusion_mod.noisy_or(flags.astype(np.int64),
                               pipeline.fusion_model)
    reject = fusion_mod.decide(np.atleast_1d(prob),
                               pipeline.fusion_model.decision_threshold)
    return float(np.mean(reject))


def detection_rate(pipeline, adv_images, adv_labels):
    """Fraction of successful attacks rejected at the current SP."""
    adv_images = as_image_batch(adv_images)
    adv_labels = as_label_array(adv_labels,
                                pipeline.victim.output_shape[-1])
    pred = pipeline.predict(adv_images)
    fooled = pred != adv_labels
    if not fooled.any():
        raise ValidationError("no successful attacks to score")
    result = pipeline.detect(adv_images[fooled])
    return float(np.mean(result.reject))


# --- CSV emission ----------------------------------------------------------

def slug(text):
    """Filesystem-safe token for attack names in CSV filenames."""
    return re.sub(r"[^A-Za-z0-9.=-]+", "-", text).strip("-")


def write_roc_csv(report, out_dir):
    """One ``roc_<attack>_<ndef>.csv`` per (attack, n_def) pair."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    keys = sorted({(r.attack, r.n_def) for r in report.records})
    for attack, n_def in keys:
        path = os.path.join(out_dir, f"roc_{slug(attack)}_{n_def}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sp", "fp_rate", "tp_rate"])
            rows = [r for r in report.records
                    if r.attack == attack and r.n_def == n_def]
            for r in sorted(rows, key=lambda r: r.sp):
                writer.writerow([f"{r.sp:g}", f"{r.fp_rate:.6f}",
                                 f"{r.tp_rate:.6f}"])
        paths.append(path)
    return paths


def write_auc_csv(report, out_dir, filename="auc_summary.csv"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, filename)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack", "n_def", "auc"])
        for (attack, n_def), value in sorted(report.auc_scores.items()):
            writer.writerow([attack, n_def, f"{value:.6f}"])
    return path


def merge_reports(reports):
    """Combine per-run reports into one (for multi-attack sweeps)."""
    merged = EvalReport()
    for rep in reports:
        merged.records.extend(rep.records)
        merged.auc_scores.update(rep.auc_scores)
        merged.metadata.setdefault("runs", []).append(rep.metadata)
    return merged
