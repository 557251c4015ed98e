"""Detection scoring: sigmoid-spaced precision/recall sweep, Pascal-VOC
average precision, F1, average localization distance, activity
classification accuracy and Gaussian temporal smoothing.

A detection on a ground-truth-active frame counts as true positive when
its confidence clears the threshold and |x_hat - x_gt| is within the
pixel tolerance; the default tolerances are 89 px (the 2 deg minimum
audible angle) and 222 px (5 deg).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .geometry import pixel_to_azimuth

TOLERANCE_PX = {2.0: 89.0, 5.0: 222.0}
DEFAULT_N_THRESHOLDS = 201
SIGMOID_SPAN = 8.0
CONFIDENCE_CUTOFF = 0.5


class MetricsError(ValueError):
    """Raised on malformed detection/ground-truth inputs."""


@dataclass(frozen=True)
class Detection:
    frame_index: int
    view_id: int
    x_hat_px: float
    c_hat: float

    def __post_init__(self):
        if not 0.0 <= self.c_hat <= 1.0:
            raise MetricsError(f"confidence must be in [0, 1], got {self.c_hat}")


@dataclass(frozen=True)
class PRCurve:
    """Parallel arrays over strictly increasing thresholds in [0, 1]."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.ndim != 1 or len(t) < 2 or np.any(np.diff(t) <= 0):
            raise MetricsError("thresholds must be strictly increasing")
        if t[0] < 0 or t[-1] > 1:
            raise MetricsError("thresholds must lie in [0, 1]")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "precision", np.asarray(self.precision, dtype=np.float64))
        object.__setattr__(self, "recall", np.asarray(self.recall, dtype=np.float64))


@dataclass(frozen=True)
class MetricsReport:
    ap_at_2deg: float
    f1_at_2deg: float
    ap_at_5deg: float
    f1_at_5deg: float
    ad_px: float          # NaN when no confident detection on an active frame
    ad_deg: float
    cls_accuracy: float


def sigmoid_thresholds(k: int = DEFAULT_N_THRESHOLDS, span: float = SIGMOID_SPAN) -> np.ndarray:
    """k confidence thresholds: a sigmoid over [-span, span] with the end
    points replaced by exact 0 and 1, clustering samples near 0 and 1."""
    if k < 3:
        raise MetricsError("need at least 3 thresholds")
    s = np.linspace(-span, span, k)
    t = 1.0 / (1.0 + np.exp(-s))
    t[0], t[-1] = 0.0, 1.0
    return t


def gaussian_smooth(series: np.ndarray, sigma_frames: float) -> np.ndarray:
    """Convolve with a +-3 sigma truncated normalized Gaussian.

    Edges renormalize over the in-range support, so a constant series is
    an exact fixed point.
    """
    if sigma_frames <= 0:
        raise MetricsError(f"sigma must be positive, got {sigma_frames}")
    series = np.asarray(series, dtype=np.float64)
    half = int(math.ceil(3 * sigma_frames))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma_frames) ** 2)
    k /= k.sum()
    num = np.convolve(series, k, mode="same")
    den = np.convolve(np.ones_like(series), k, mode="same")
    return num / den


def smooth_detections(detections: list, sigma_frames: float) -> list:
    """Per-view temporal smoothing of x_hat and c_hat over frame order."""
    by_view: dict[int, list] = {}
    for d in detections:
        by_view.setdefault(d.view_id, []).append(d)
    out = []
    for view in sorted(by_view):
        dets = sorted(by_view[view], key=lambda d: d.frame_index)
        frames = [d.frame_index for d in dets]
        if frames != sorted(set(frames)):
            raise MetricsError(f"view {view}: detections must be unique per frame")
        x = gaussian_smooth(np.array([d.x_hat_px for d in dets]), sigma_frames)
        c = gaussian_smooth(np.array([d.c_hat for d in dets]), sigma_frames)
        c = np.clip(c, 0.0, 1.0)
        out.extend(Detection(d.frame_index, view, float(xi), float(ci))
                   for d, xi, ci in zip(dets, x, c))
    return out


def _aligned_arrays(detections: list, ground_truth: list):
    """Match detections to GT per (frame, view); error on any mismatch."""
    gt_map = {}
    for g in ground_truth:
        key = (g.frame_index, g.view_id)
        if key in gt_map:
            raise MetricsError(f"duplicate ground-truth record for {key}")
        gt_map[key] = g
    keys = []
    for d in detections:
        key = (d.frame_index, d.view_id)
        if key not in gt_map:
            raise MetricsError(f"detection at {key} has no ground-truth record")
        keys.append(key)
    if len(set(keys)) != len(keys):
        raise MetricsError("multiple detections for one (frame, view)")
    if len(keys) != len(gt_map):
        missing = set(gt_map) - set(keys)
        raise MetricsError(f"{len(missing)} ground-truth frames lack detections "
                           f"(e.g. {sorted(missing)[:3]})")
    det = sorted(detections, key=lambda d: (d.view_id, d.frame_index))
    c_hat = np.array([d.c_hat for d in det])
    x_hat = np.array([d.x_hat_px for d in det])
    gt = [gt_map[(d.frame_index, d.view_id)] for d in det]
    active = np.array([g.active for g in gt])
    x_gt = np.array([g.x_px if g.x_px is not None else np.nan for g in gt])
    if np.any(active & ~np.isfinite(x_gt)):
        raise MetricsError("active ground-truth frames must carry x_px for scoring")
    return c_hat, x_hat, active, x_gt


def pr_curve(detections: list, ground_truth: list, tolerance_px: float,
             thresholds: np.ndarray | None = None) -> PRCurve:
    """Precision/recall over thresholds.

    At threshold t: positives are detections with c_hat >= t; a positive
    on an active frame within tolerance is a TP, every other positive an
    FP, and active frames without a TP count as FN. 0/0 precision is 1.
    """
    if thresholds is None:
        thresholds = sigmoid_thresholds()
    c_hat, x_hat, active, x_gt = _aligned_arrays(detections, ground_truth)
    close = active & (np.abs(x_hat - np.where(np.isfinite(x_gt), x_gt, np.inf))
                      <= tolerance_px)
    n_active = int(active.sum())
    precision, recall = [], []
    for t in thresholds:
        positive = c_hat >= t
        tp = int(np.sum(positive & close))
        fp = int(np.sum(positive & ~close))
        precision.append(tp / (tp + fp) if tp + fp else 1.0)
        recall.append(tp / n_active if n_active else 1.0)
    return PRCurve(np.asarray(thresholds), np.array(precision), np.array(recall))


def voc_ap(curve: PRCurve) -> float:
    """Area under the monotonically decreasing precision envelope.

    The envelope sets p(r) to the best precision at any recall >= r; the
    integral is the stepwise sum over the achieved recall range (zero
    precision beyond the largest achieved recall).
    """
    order = np.argsort(curve.recall, kind="stable")
    r = curve.recall[order]
    p = curve.precision[order]
    # envelope from the right: p_env[i] = max(p[i:])
    p_env = np.maximum.accumulate(p[::-1])[::-1]
    ap = r[0] * p_env[0]  # rectangle from recall 0 up to the smallest r
    ap += float(np.sum(np.diff(r) * p_env[1:]))
    return float(ap)


def max_f1(curve: PRCurve) -> float:
    p, r = curve.precision, curve.recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return float(np.max(f1))


def average_distance(detections: list, ground_truth: list, cam,
                     confidence_threshold: float = CONFIDENCE_CUTOFF) -> tuple[float, float]:
    """Mean |x_hat - x_gt| over confident detections on active frames.

    Returns (pixels, degrees); degrees via per-frame ray angles between
    the predicted and true pixels. cam is a CameraModel or a
    {view_id: CameraModel} map. (NaN, NaN) when no frame qualifies.
    """
    cams = cam if isinstance(cam, dict) else None
    c_hat, x_hat, active, x_gt = _aligned_arrays(detections, ground_truth)
    det = sorted(detections, key=lambda d: (d.view_id, d.frame_index))
    mask = active & (c_hat >= confidence_threshold)
    if not mask.any():
        return float("nan"), float("nan")
    px_err = np.abs(x_hat[mask] - x_gt[mask])
    deg_err = []
    for i in np.flatnonzero(mask):
        c = cams[det[i].view_id] if cams is not None else cam
        deg_err.append(abs(pixel_to_azimuth(c, x_hat[i]) - pixel_to_azimuth(c, x_gt[i])))
    return float(px_err.mean()), float(np.mean(deg_err))


def classification_accuracy(detections: list, ground_truth: list,
                            confidence_threshold: float = CONFIDENCE_CUTOFF) -> float:
    """Fraction of frames whose thresholded confidence matches GT activity."""
    c_hat, _, active, _ = _aligned_arrays(detections, ground_truth)
    return float(np.mean((c_hat >= confidence_threshold) == active))


def compute_report(detections: list, ground_truth: list, cam,
                   thresholds: np.ndarray | None = None) -> MetricsReport:
    curve2 = pr_curve(detections, ground_truth, TOLERANCE_PX[2.0], thresholds)
    curve5 = pr_curve(detections, ground_truth, TOLERANCE_PX[5.0], thresholds)
    ad_px, ad_deg = average_distance(detections, ground_truth, cam)
    return MetricsReport(
        ap_at_2deg=voc_ap(curve2), f1_at_2deg=max_f1(curve2),
        ap_at_5deg=voc_ap(curve5), f1_at_5deg=max_f1(curve5),
        ad_px=ad_px, ad_deg=ad_deg,
        cls_accuracy=classification_accuracy(detections, ground_truth),
    )


# ---------------------------------------------------------------------------
# Files: detections CSV "frame,view,x_hat_px,c_hat" (optional leading
# "# config=" comment); report as deterministic key = value lines.
# ---------------------------------------------------------------------------

def write_detections(path, detections: list, config_hash: str = "") -> None:
    with open(path, "w") as f:
        if config_hash:
            f.write(f"# config={config_hash}\n")
        f.write("frame,view,x_hat_px,c_hat\n")
        for d in sorted(detections, key=lambda d: (d.view_id, d.frame_index)):
            f.write(f"{d.frame_index},{d.view_id},{float(d.x_hat_px)!r},{float(d.c_hat)!r}\n")


def read_detections(path) -> tuple[list, str]:
    detections, config_hash = [], ""
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("# config="):
                config_hash = line.split("=", 1)[1]
                continue
            if line.startswith("#") or line.startswith("frame,"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise MetricsError(f"{path}:{lineno}: expected 4 fields")
            try:
                detections.append(Detection(int(parts[0]), int(parts[1]),
                                            float(parts[2]), float(parts[3])))
            except ValueError as e:
                raise MetricsError(f"{path}:{lineno}: {e}") from None
    return detections, config_hash


def write_report(path, report: MetricsReport, config_hash: str = "",
                 extra: dict | None = None) -> None:
    with open(path, "w") as f:
        if config_hash:
            f.write(f"config = {config_hash}\n")
        for fld in fields(MetricsReport):
            f.write(f"{fld.name} = {float(getattr(report, fld.name))!r}\n")
        for key in sorted(extra or {}):
            f.write(f"{key} = {float(extra[key])!r}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out
