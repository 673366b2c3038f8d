"""Pose and shape evaluation metrics: MPJPE, PA-MPJPE, PVE, PCK, F-scores.

Inputs are in meters/pixels; distance metrics are reported in millimeters.
PCK uses strict inequality at the threshold boundary. Avg-PCK averages the
fixed threshold set ``PCK_THRESHOLDS`` (fractions of the larger bounding-box
side).
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, DimensionMismatchError

MM = 1000.0
PCK_THRESHOLDS = (0.01, 0.025, 0.05, 0.075, 0.1)


def _check_counts(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionMismatchError(
            f"point sets must both be (N,3); got {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 1:
        raise DimensionMismatchError("need at least one point")
    return pred, gt


def mpjpe(pred_joints, gt_joints, align="none", root_index=0):
    """Mean per-joint position error in mm; align='root' removes the root
    joint (pelvis, or wrist for hand evaluation) from both."""
    pred, gt = _check_counts(pred_joints, gt_joints)
    if align == "root":
        pred = pred - pred[root_index]
        gt = gt - gt[root_index]
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1))) * MM


def procrustes_align(pred, gt):
    """Similarity transform (s, R, t) minimizing sum ||s R p + t - g||^2.

    R is a proper rotation (reflections corrected). Raises on collinear or
    coincident inputs.
    """
    pred, gt = _check_counts(pred, gt)
    if pred.shape[0] < 3:
        raise DegenerateInputError("need at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    cov = g0.T @ p0 / pred.shape[0]
    U, d, Vt = np.linalg.svd(cov)
    if d[0] < 1e-15 or d[1] <= 1e-12 * d[0]:
        raise DegenerateInputError("points are coincident or collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_p = float(np.sum(p0 * p0)) / pred.shape[0]
    s = float(np.trace(np.diag(d) @ S)) / var_p
    t = mu_g - s * R @ mu_p
    return s, R, t


def apply_similarity(points, s, R, t):
    return s * np.asarray(points, dtype=float) @ R.T + t


def pa_mpjpe(pred_joints, gt_joints):
    """MPJPE in mm after Procrustes (similarity) alignment."""
    s, R, t = procrustes_align(pred_joints, gt_joints)
    return mpjpe(apply_similarity(pred_joints, s, R, t), gt_joints, align="none")


def pve(pred_vertices, gt_vertices, pred_root=None, gt_root=None):
    """Mean per-vertex error in mm after root alignment (roots are the
    respective root-joint positions; no alignment when omitted)."""
    pred, gt = _check_counts(pred_vertices, gt_vertices)
    if pred_root is not None:
        pred = pred - np.asarray(pred_root, dtype=float)
    if gt_root is not None:
        gt = gt - np.asarray(gt_root, dtype=float)
    return float(np.mean(np.linalg.norm(pred - gt, axis=1))) * MM


def keypoint_bbox(points2d, visible=None):
    """Tight box over the visible ground-truth keypoints: (w, h)."""
    pts = np.asarray(points2d, dtype=float)
    if visible is not None:
        pts = pts[np.asarray(visible, dtype=bool)]
    if pts.shape[0] == 0:
        return None
    w = float(pts[:, 0].max() - pts[:, 0].min())
    h = float(pts[:, 1].max() - pts[:, 1].min())
    return w, h


def pck(pred2d, gt2d, bbox, alpha, visible=None):
    """Fraction of keypoints with pixel error strictly below
    alpha * max(bbox_w, bbox_h); invisible GT keypoints are excluded.
    Returns None when no keypoint is visible."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    pred = np.asarray(pred2d, dtype=float)
    gt = np.asarray(gt2d, dtype=float)
    if pred.shape != gt.shape:
        raise DimensionMismatchError("2D point sets must match")
    mask = np.ones(pred.shape[0], dtype=bool) if visible is None else np.asarray(visible, bool)
    if not mask.any():
        return None
    side = max(bbox[0], bbox[1])
    if side <= 0:
        raise ValueError("bounding box side must be positive")
    err = np.linalg.norm(pred[mask] - gt[mask], axis=1)
    return float(np.mean(err < alpha * side))


def avg_pck(pred2d, gt2d, bbox, visible=None, thresholds=PCK_THRESHOLDS):
    """PCK averaged over the standard threshold set."""
    vals = [pck(pred2d, gt2d, bbox, a, visible) for a in thresholds]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def fscore(pred_vertices, gt_vertices, dist_mm, align=True):
    """F-score between point clouds at a distance threshold (mm).

    precision = fraction of predicted points within dist of some GT point,
    recall the symmetric quantity; correspondence-free nearest neighbors.
    Procrustes alignment is applied first unless align=False.
    """
    pred = np.asarray(pred_vertices, dtype=float)
    gt = np.asarray(gt_vertices, dtype=float)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise DimensionMismatchError("point clouds must be non-empty")
    if align:
        s, R, t = procrustes_align(pred, gt)
        pred = apply_similarity(pred, s, R, t)
    d = dist_mm / MM
    d_pred = cKDTree(gt).query(pred)[0]
    d_gt = cKDTree(pred).query(gt)[0]
    precision = float(np.mean(d_pred <= d))
    recall = float(np.mean(d_gt <= d))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def similarity_residual(pred, gt, s, R, t):
    """Sum of squared distances after applying a similarity transform."""
    diff = apply_similarity(pred, s, R, t) - np.asarray(gt, dtype=float)
    return float(np.sum(diff * diff))
