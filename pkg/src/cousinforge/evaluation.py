"""Reconstruction fidelity metrics, mAP at IoU 0.25, power-law fits, and
navigation outcome metrics.

Predictions may be fused object nodes or scene placements; both expose
a center, an orientation, a box, a category, and optionally an asset id
and a retrieval score. Matching against ground truth is greedy by
ascending centroid distance with a 5 m gate, one-to-one, with
deterministic tie-breaking, and all downstream means run over the
matched pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroError
from .geometry import OrientedBox, iou_3d

MATCH_GATE = 5.0


@dataclass
class GtObject:
    category: str
    box: OrientedBox
    gt_asset_id: str | None = None


@dataclass
class FidelityReport:
    cat_recovery: float
    asset_recovery: float | None
    dist_err: float | None
    ori_err: float | None
    scale_err: float | None
    map25: float

    def to_dict(self) -> dict:
        return {
            "cat_recovery": self.cat_recovery,
            "asset_recovery": self.asset_recovery,
            "dist_err": self.dist_err,
            "ori_err": self.ori_err,
            "scale_err": self.scale_err,
            "map25": self.map25,
        }


@dataclass
class ScalingFit:
    alpha: float
    beta: float
    pearson_r: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "pearson_r": self.pearson_r,
            "n_points": self.n_points,
        }


@dataclass
class NavMetrics:
    sr: int
    ct: int
    rc: float
    dtg: float

    def to_dict(self) -> dict:
        return {"sr": self.sr, "ct": self.ct, "rc": self.rc, "dtg": self.dtg}


# ---------------------------------------------------------------------------
# Prediction field access (works for ObjectNode and Placement alike)


def _pred_id(pred) -> int:
    return int(pred.node_id)


def _pred_center(pred) -> np.ndarray:
    if hasattr(pred, "position"):
        return np.asarray(pred.position, dtype=np.float64)
    return np.asarray(pred.centroid, dtype=np.float64)


def _pred_box(pred) -> OrientedBox:
    if hasattr(pred, "footprint"):
        return pred.footprint
    return pred.box


def _pred_angle(pred) -> float:
    if hasattr(pred, "heading"):
        return float(pred.heading)
    return float(pred.footprint.yaw)


def _pred_category(pred) -> str:
    return pred.category


def _pred_score(pred) -> float:
    return float(getattr(pred, "score", 1.0))


def _pred_asset_id(pred) -> str | None:
    return getattr(pred, "asset_id", None)


# ---------------------------------------------------------------------------
# Matching and fidelity


def match_objects(pred: list, gt: list[GtObject], max_dist: float = MATCH_GATE) -> list:
    """Greedy one-to-one matching by ascending centroid distance.

    Returns (pred_index, gt_index) pairs; candidate pairs beyond
    max_dist never match. Ties resolve by (distance, pred_id, gt index).
    """
    candidates = []
    for pi, p in enumerate(pred):
        center = _pred_center(p)
        for gi, g in enumerate(gt):
            dist = float(np.linalg.norm(center - g.box.center))
            if dist <= max_dist:
                candidates.append((dist, _pred_id(p), gi, pi))
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    matching = []
    for dist, _, gi, pi in candidates:
        if pi in used_pred or gi in used_gt:
            continue
        used_pred.add(pi)
        used_gt.add(gi)
        matching.append((pi, gi))
    return matching


def folded_angle_deg(a: float, b: float) -> float:
    """Absolute angle difference folded to [0, 90] degrees."""
    delta = abs(np.degrees(a) - np.degrees(b)) % 360.0
    delta = min(delta, 360.0 - delta)
    return float(min(delta, 180.0 - delta))


def fidelity(
    pred: list,
    gt: list[GtObject],
    matching: list | None = None,
    iou_threshold: float = 0.25,
) -> FidelityReport:
    """Table-style fidelity report over a matched prediction/gt pair set.

    Percentages are 0-100. asset_recovery is None when no gt object
    carries an asset id; the error means are None when nothing matched.
    """
    if matching is None:
        matching = match_objects(pred, gt)
    cat_hits = 0
    dists = []
    oris = []
    scales = []
    asset_hits = 0
    for pi, gi in matching:
        p, g = pred[pi], gt[gi]
        if _pred_category(p) == g.category:
            cat_hits += 1
        dists.append(float(np.linalg.norm(_pred_center(p) - g.box.center)))
        oris.append(folded_angle_deg(_pred_angle(p), g.box.yaw))
        scales.append(abs(_pred_box(p).volume - g.box.volume))
        if g.gt_asset_id is not None and _pred_asset_id(p) == g.gt_asset_id:
            asset_hits += 1
    with_asset = sum(1 for g in gt if g.gt_asset_id is not None)
    return FidelityReport(
        cat_recovery=100.0 * cat_hits / len(gt) if gt else 0.0,
        asset_recovery=100.0 * asset_hits / with_asset if with_asset else None,
        dist_err=float(np.mean(dists)) if dists else None,
        ori_err=float(np.mean(oris)) if oris else None,
        scale_err=float(np.mean(scales)) if scales else None,
        map25=map25(pred, gt, iou_threshold=iou_threshold),
    )


def _average_precision(flags: list[bool], n_gt: int) -> float:
    """All-point interpolated AP from ordered TP/FP flags."""
    if n_gt == 0:
        return 0.0
    tp = 0
    fp = 0
    recalls = []
    precisions = []
    for is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    ap = 0.0
    prev_recall = 0.0
    for i, recall in enumerate(recalls):
        if recall > prev_recall:
            ap += (recall - prev_recall) * max(precisions[i:])
        prev_recall = recall
    return ap


def map25(pred: list, gt: list[GtObject], iou_threshold: float = 0.25) -> float:
    """Mean AP at 3D IoU >= threshold over the categories present in gt.

    Predictions sort by descending retrieval score (ties by id); each
    greedily claims the unmatched gt box of its category with the
    highest IoU at or above the threshold. Predictions of categories
    absent from gt are ignored.
    """
    categories = sorted({g.category for g in gt})
    if not categories:
        return 0.0
    aps = []
    for category in categories:
        cat_gt = [g for g in gt if g.category == category]
        cat_pred = [p for p in pred if _pred_category(p) == category]
        cat_pred.sort(key=lambda p: (-_pred_score(p), _pred_id(p)))
        taken: set[int] = set()
        flags = []
        for p in cat_pred:
            box = _pred_box(p)
            best_iou = 0.0
            best_gi = -1
            for gi, g in enumerate(cat_gt):
                if gi in taken:
                    continue
                iou = iou_3d(box, g.box)
                if iou > best_iou:
                    best_iou = iou
                    best_gi = gi
            if best_gi >= 0 and best_iou >= iou_threshold:
                taken.add(best_gi)
                flags.append(True)
            else:
                flags.append(False)
        aps.append(_average_precision(flags, len(cat_gt)))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Power-law scaling


def fit_power_law(points: list) -> ScalingFit:
    """OLS fit of log E on log N for points (N, SR) with E = 1 - SR.

    alpha = -slope, beta = exp(intercept), pearson_r on the log-log
    pairs (0 when E is constant). Raises ZeroError when any E <= 0 (the
    log is undefined; callers exclude such points).
    """
    if len(points) < 2:
        raise ValueError(f"need at least 2 points, got {len(points)}")
    ns = np.array([float(n) for n, _ in points])
    errors = np.array([1.0 - float(sr) for _, sr in points])
    if (ns <= 0).any():
        raise ValueError("all N must be positive")
    if (errors <= 0).any():
        raise ZeroError("E = 1 - SR must be positive for every point")
    x = np.log(ns)
    y = np.log(errors)
    x_mean, y_mean = x.mean(), y.mean()
    var_x = ((x - x_mean) ** 2).mean()
    if var_x == 0:
        raise ValueError("need at least 2 distinct N values")
    cov = ((x - x_mean) * (y - y_mean)).mean()
    slope = cov / var_x
    intercept = y_mean - slope * x_mean
    var_y = ((y - y_mean) ** 2).mean()
    if var_y == 0:
        pearson = 0.0
    else:
        pearson = float(np.clip(cov / np.sqrt(var_x * var_y), -1.0, 1.0))
    return ScalingFit(
        alpha=float(-slope),
        beta=float(np.exp(intercept)),
        pearson_r=pearson,
        n_points=len(points),
    )


# ---------------------------------------------------------------------------
# Navigation metrics


def nav_metrics(
    trajectory: np.ndarray,
    route: np.ndarray,
    goal: np.ndarray,
    tol: float = 2.0,
    collisions: list | None = None,
) -> NavMetrics:
    """Outcome metrics of one episode.

    trajectory is an (n, >=3) array whose columns start (time, x, y);
    route is (w, 2) ordered waypoints. sr = 1 iff the final pose is
    within tol of the goal and no collision occurred; rc = 100 x
    (1-based index of the farthest waypoint approached within tol over
    the whole trajectory) / w; dtg = final distance to goal.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 2 or trajectory.shape[0] == 0 or trajectory.shape[1] < 3:
        raise ValueError("trajectory must be a non-empty (n, >=3) array")
    route = np.asarray(route, dtype=np.float64).reshape(-1, 2)
    goal = np.asarray(goal, dtype=np.float64).reshape(2)
    collisions = list(collisions) if collisions else []
    xy = trajectory[:, 1:3]
    final = xy[-1]
    dtg = float(np.linalg.norm(final - goal))
    sr = 1 if dtg <= tol and not collisions else 0
    reached = 0
    for wi, waypoint in enumerate(route):
        if np.min(np.linalg.norm(xy - waypoint, axis=1)) <= tol:
            reached = wi + 1
    rc = 100.0 * reached / len(route) if len(route) else 0.0
    return NavMetrics(sr=sr, ct=len(collisions), rc=rc, dtg=dtg)
