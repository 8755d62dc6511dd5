"""Depth evaluation: the standard error/accuracy metric suite, the per-image
protocol with relative or absolute scaling, and depth-binned / per-class
error breakdowns.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DepthMap
from .scalecal import per_image_scale

RELATIVE = "relative-per-image"
ABSOLUTE = "absolute-global"


@dataclass
class MetricsRecord:
    """One evaluation run: errors (lower better), delta accuracies (higher better)."""

    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    scaling_mode: str

    def to_dict(self):
        return asdict(self)

    def row(self):
        return "%9.4f %9.4f %9.4f %9.4f %8.4f %8.4f %8.4f %10d" % (
            self.abs_rel, self.sq_rel, self.rms, self.rms_log,
            self.delta1, self.delta2, self.delta3, self.n_pixels)

    HEADER = "%9s %9s %9s %9s %8s %8s %8s %10s" % (
        "abs-rel", "sq-rel", "rms", "rms-log", "d<1.25", "d<1.25^2", "d<1.25^3", "pixels")


def _unpack(pred, gt):
    pred = np.asarray(pred.values if isinstance(pred, DepthMap) else pred, dtype=np.float64)
    if isinstance(gt, DepthMap):
        return pred, np.asarray(gt.values, dtype=np.float64), gt.valid.copy()
    gt = np.asarray(gt, dtype=np.float64)
    return pred, gt, np.isfinite(gt) & (gt > 0)


def _valid_set(gt, gt_valid, cap, d_eval_min):
    return gt_valid & (gt > d_eval_min) & (gt < cap)


def compute_metrics(pred, gt, cap=80.0, d_eval_min=1e-3, scaling_mode=ABSOLUTE):
    """Error metrics over pixels with GT inside (d_eval_min, cap).

    Predictions are clamped into [d_eval_min, cap] first; delta accuracies use
    a strict '<' threshold.
    """
    pred, gt, gt_valid = _unpack(pred, gt)
    if pred.shape != gt.shape:
        raise ValueError("pred %r and gt %r disagree" % (pred.shape, gt.shape))
    valid = _valid_set(gt, gt_valid, cap, d_eval_min)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid pixels to evaluate")
    p = np.clip(pred[valid], d_eval_min, cap)
    g = gt[valid]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsRecord(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rms=float(np.sqrt(np.mean(diff * diff))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_pixels=n,
        scaling_mode=scaling_mode,
    )


def _crop_window(arr, crop):
    if crop is None:
        return arr
    y0, y1, x0, x1 = crop
    return arr[y0:y1, x0:x1]


def scaled_prediction(pred, gt, mode, psi=None, cap=80.0, d_eval_min=1e-3):
    """Apply the evaluation protocol's scaling to one prediction."""
    if mode == RELATIVE:
        factor = per_image_scale(pred, gt, d_eval_min=d_eval_min, cap=cap).psi
    elif mode == ABSOLUTE:
        if psi is None:
            raise ValueError("absolute-scale evaluation requires a global scale factor")
        factor = float(psi)
    else:
        raise ValueError("unknown scaling mode %r" % mode)
    return pred * factor


def evaluate(model, dataset, mode=RELATIVE, psi=None, cap=80.0, d_eval_min=1e-3, crop=None):
    """Image-averaged metrics of `model` (image -> depth callable) on a dataset."""
    per_image = []
    n_pixels = 0
    for trip in dataset:
        if trip.gt_depth is None:
            raise ValueError("evaluation dataset must carry depth GT")
        pred = np.asarray(model(trip.center), dtype=np.float64)
        gt_values = _crop_window(trip.gt_depth.values, crop)
        gt_valid = _crop_window(trip.gt_depth.valid, crop)
        gt = DepthMap(gt_values, gt_valid)
        pred = _crop_window(pred, crop)
        pred = scaled_prediction(pred, gt, mode, psi=psi, cap=cap, d_eval_min=d_eval_min)
        rec = compute_metrics(pred, gt, cap=cap, d_eval_min=d_eval_min, scaling_mode=mode)
        per_image.append(rec)
        n_pixels += rec.n_pixels
    if not per_image:
        raise ValueError("empty evaluation dataset")
    fields = ("abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3")
    means = {f: float(np.mean([getattr(r, f) for r in per_image])) for f in fields}
    return MetricsRecord(n_pixels=n_pixels, scaling_mode=mode, **means)


def binned_metrics(pred, gt, bin_edges, cap=80.0, d_eval_min=1e-3):
    """Per-depth-bin abs-rel and pixel occupancy for one prediction/GT pair.

    Bins partition by GT depth between consecutive edges; an empty bin reports
    abs_rel None (absent), never zero. Occupancies are fractions of the valid
    pixel set and sum to 1 when the edges cover (d_eval_min, cap).
    """
    pred, gt, gt_valid = _unpack(pred, gt)
    edges = list(bin_edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing, got %r" % (edges,))
    valid = _valid_set(gt, gt_valid, cap, d_eval_min)
    total = int(valid.sum())
    if total == 0:
        raise ValueError("no valid pixels to bin")
    p = np.clip(pred, d_eval_min, cap)
    out = []
    for lo, hi in zip(edges, edges[1:]):
        sel = valid & (gt >= lo) & (gt < hi)
        n = int(sel.sum())
        abs_rel = float(np.mean(np.abs(p[sel] - gt[sel]) / gt[sel])) if n else None
        out.append({"lo": lo, "hi": hi, "abs_rel": abs_rel,
                    "fraction": n / total, "n_pixels": n})
    return out


def masked_metrics(pred, gt, classes, class_set=None, cap=80.0, d_eval_min=1e-3):
    """Abs-rel restricted to each semantic class, plus class pixel shares.

    Classes absent from the valid pixel set report abs_rel None.
    """
    pred, gt, gt_valid = _unpack(pred, gt)
    valid = _valid_set(gt, gt_valid, cap, d_eval_min)
    total = int(valid.sum())
    if total == 0:
        raise ValueError("no valid pixels to evaluate")
    p = np.clip(pred, d_eval_min, cap)
    names = class_set if class_set is not None else sorted(classes.legend.values())
    by_name = {v: k for k, v in classes.legend.items()}
    out = {}
    for name in names:
        if name not in by_name:
            raise ValueError("class %r absent from the legend" % name)
        sel = valid & (classes.values == by_name[name])
        n = int(sel.sum())
        abs_rel = float(np.mean(np.abs(p[sel] - gt[sel]) / gt[sel])) if n else None
        out[name] = {"abs_rel": abs_rel, "fraction": n / total, "n_pixels": n}
    return out


def _pooled_scaled_pixels(model, dataset, mode, psi, cap, d_eval_min):
    for trip in dataset:
        pred = np.asarray(model(trip.center), dtype=np.float64)
        gt = trip.gt_depth
        pred = scaled_prediction(pred, gt, mode, psi=psi, cap=cap, d_eval_min=d_eval_min)
        yield trip, np.clip(pred, d_eval_min, cap), gt


def evaluate_binned(model, dataset, bin_edges, mode=RELATIVE, psi=None, cap=80.0, d_eval_min=1e-3):
    """Depth-binned abs-rel pooled over all pixels of a dataset."""
    edges = list(bin_edges)
    sums = np.zeros(len(edges) - 1)
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    for _, pred, gt in _pooled_scaled_pixels(model, dataset, mode, psi, cap, d_eval_min):
        valid = _valid_set(gt.values.astype(np.float64), gt.valid, cap, d_eval_min)
        for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
            sel = valid & (gt.values >= lo) & (gt.values < hi)
            counts[i] += int(sel.sum())
            if sel.any():
                sums[i] += float(np.sum(np.abs(pred[sel] - gt.values[sel]) / gt.values[sel]))
    total = counts.sum()
    if total == 0:
        raise ValueError("no valid pixels to bin")
    return [{"lo": lo, "hi": hi,
             "abs_rel": (sums[i] / counts[i]) if counts[i] else None,
             "fraction": counts[i] / total, "n_pixels": int(counts[i])}
            for i, (lo, hi) in enumerate(zip(edges, edges[1:]))]


def evaluate_per_class(model, dataset, mode=RELATIVE, psi=None, cap=80.0, d_eval_min=1e-3):
    """Per-class abs-rel pooled over all pixels of a dataset."""
    sums, counts, total = {}, {}, 0
    legend = None
    for trip, pred, gt in _pooled_scaled_pixels(model, dataset, mode, psi, cap, d_eval_min):
        legend = trip.gt_semantics.legend
        valid = _valid_set(gt.values.astype(np.float64), gt.valid, cap, d_eval_min)
        total += int(valid.sum())
        for class_id, name in legend.items():
            sel = valid & (trip.gt_semantics.values == class_id)
            counts[name] = counts.get(name, 0) + int(sel.sum())
            if sel.any():
                sums[name] = sums.get(name, 0.0) + float(
                    np.sum(np.abs(pred[sel] - gt.values[sel]) / gt.values[sel]))
    if total == 0:
        raise ValueError("no valid pixels to evaluate")
    return {name: {"abs_rel": (sums.get(name, 0.0) / counts[name]) if counts[name] else None,
                   "fraction": counts[name] / total, "n_pixels": counts[name]}
            for name in sorted(counts)}


def format_report(record, binned=None, per_class=None):
    lines = ["scaling mode: %s" % record.scaling_mode, MetricsRecord.HEADER, record.row()]
    if binned:
        lines.append("")
        lines.append("abs-rel by GT depth bin:")
        for b in binned:
            value = "absent" if b["abs_rel"] is None else "%.4f" % b["abs_rel"]
            lines.append("  [%6.1f, %6.1f) m  abs-rel %s  occupancy %5.1f%%"
                         % (b["lo"], b["hi"], value, 100 * b["fraction"]))
    if per_class:
        lines.append("")
        lines.append("abs-rel by class:")
        for name, row in per_class.items():
            value = "absent" if row["abs_rel"] is None else "%.4f" % row["abs_rel"]
            lines.append("  %-10s abs-rel %s  pixel share %5.1f%%"
                         % (name, value, 100 * row["fraction"]))
    return "\n".join(lines) + "\n"


def write_report(path, record, binned=None, per_class=None, extra=None):
    """Emit the machine-readable JSON report and a human-readable text twin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"metrics": record.to_dict()}
    if binned is not None:
        payload["binned"] = binned
    if per_class is not None:
        payload["per_class"] = per_class
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    text = format_report(record, binned, per_class)
    path.with_suffix(".txt").write_text(text)
    return text


def plot_binned(binned, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centers = [(b["lo"] + b["hi"]) / 2 for b in binned]
    widths = [b["hi"] - b["lo"] for b in binned]
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.bar(centers, [b["fraction"] for b in binned], width=widths,
            color="lightgray", edgecolor="gray", label="pixel share")
    ax1.set_xlabel("GT depth (m)")
    ax1.set_ylabel("pixel share")
    ax2 = ax1.twinx()
    xs = [c for c, b in zip(centers, binned) if b["abs_rel"] is not None]
    ys = [b["abs_rel"] for b in binned if b["abs_rel"] is not None]
    ax2.plot(xs, ys, "o-", color="tab:red", label="abs-rel")
    ax2.set_ylabel("abs-rel")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_class(per_class, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [n for n, row in per_class.items() if row["abs_rel"] is not None]
    values = [per_class[n]["abs_rel"] for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, color="tab:blue")
    ax.set_ylabel("abs-rel")
    for i, n in enumerate(names):
        ax.text(i, values[i], "%.0f%%" % (100 * per_class[n]["fraction"]),
                ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
