"""Multi-view, multi-frame fitting.

Sparse 3D keypoints are triangulated per frame (RANSAC over 2-view
hypotheses), tracks are smoothed, the rig is initialized from the
triangulations, and an alternating Levenberg-Marquardt schedule then
descends one global objective: (1) camera extrinsics, (2) shape + skeleton
scales shared across frames, (3) per-frame pose with temporal smoothness.
Shape and scales are single arrays referenced by every frame of the output.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import Camera, project_clamped, project_depths, MIN_DEPTH
from .errors import (DegenerateGeometryError, RigfitError, TriangulationError,
                     UnderConstrainedError)
from .fit_single import (FitConfig, FitResult, VERTEX_ID_BASE,
                         camera_pose_from_delta)
from .optim import dual as dm
from .optim.dual import Dual
from .optim.layout import ParamLayout
from .optim.problem import ResidualProblem
from .optim.robust import huber_norm
from .optim.solvers import LMConfig, solve_lm
from .priors import gmm_nll, joint_limit_residuals
from .rig import RigParams, fk_transforms, skin_vertices_from


@dataclass
class MultiViewSequence:
    cameras: list
    frames: list                       # frames[t][c] -> [Observation2D]
    frame_rate: float = 30.0

    def __post_init__(self):
        for t, views in enumerate(self.frames):
            if len(views) != len(self.cameras):
                raise RigfitError(
                    f"frame {t} has {len(views)} views, expected {len(self.cameras)}")


@dataclass
class TriangulatedPoint:
    id: int
    point: np.ndarray
    inlier_views: list
    residual_px: float


@dataclass
class RansacConfig:
    threshold_px: float = 4.0
    iters: int = 64
    seed: int = 0


@dataclass
class MultiFitConfig:
    base: FitConfig = field(default_factory=FitConfig)
    # 3D residuals are in meters while 2D residuals are in pixels; the
    # default weight carries the unit balance (~(focal/depth)^2 at desk
    # scale), otherwise triangulated evidence is swamped by pixel terms
    lambda_kp3d: float = 2e4
    lambda_smooth: float = 1e-2
    second_diff: bool = False
    ransac: RansacConfig = field(default_factory=RansacConfig)
    track_smooth_window: int = 3
    # temporal consistency gate: a frame's triangulation is dropped when it
    # sits further from its track median than this (meters) and 8x the
    # track's own median deviation; catches 2-2 consensus ties that RANSAC
    # cannot resolve within a single frame
    track_gate_m: float = 0.3
    refine_cameras: bool = True
    block_tol: float = 1e-4
    max_rounds: int = 10
    lm_pose: LMConfig = field(default_factory=lambda: LMConfig(max_iters=25))
    lm_shared: LMConfig = field(default_factory=lambda: LMConfig(max_iters=15))
    lm_cameras: LMConfig = field(default_factory=lambda: LMConfig(max_iters=10))
    # joint refinement over all unfrozen blocks after the alternation stops
    # (the alternating schedule converges slowly once blocks are coupled)
    final_polish: bool = True
    lm_polish: LMConfig = field(default_factory=lambda: LMConfig(max_iters=30))
    init: list = None                  # optional per-frame RigParams


@dataclass
class MultiFitResult:
    frames: list                       # per-frame FitResult
    scales: np.ndarray
    shape: np.ndarray
    cameras: list
    total_cost: float
    round_costs: list
    converged: bool
    triangulated: list                 # per frame {id: TriangulatedPoint}
    warnings: list = field(default_factory=list)


def _reprojection_px(cameras, point, pixels, view_ids):
    errs = np.empty(len(view_ids))
    for n, c in enumerate(view_ids):
        cam = cameras[c]
        Xc = cam.to_camera(point)[0]
        if Xc[2] <= MIN_DEPTH:
            errs[n] = np.inf
            continue
        u = cam.fx * Xc[0] / Xc[2] + cam.cx
        v = cam.fy * Xc[1] / Xc[2] + cam.cy
        errs[n] = np.hypot(u - pixels[n][0], v - pixels[n][1])
    return errs


def _check_ray_geometry(cameras, pixels, view_ids):
    centers = np.array([cameras[c].center for c in view_ids])
    rays = []
    for n, c in enumerate(view_ids):
        cam = cameras[c]
        d = np.array([(pixels[n][0] - cam.cx) / cam.fx,
                      (pixels[n][1] - cam.cy) / cam.fy, 1.0])
        d = cam.rotation.T @ d
        rays.append(d / np.linalg.norm(d))
    rays = np.array(rays)
    max_cross = 0.0
    max_base = 0.0
    for i in range(len(view_ids)):
        for j in range(i + 1, len(view_ids)):
            max_cross = max(max_cross, float(np.linalg.norm(np.cross(rays[i], rays[j]))))
            max_base = max(max_base, float(np.linalg.norm(centers[i] - centers[j])))
    if max_cross < 1e-6 or max_base < 1e-9:
        raise DegenerateGeometryError(
            "rays are parallel or camera centers coincide")


def triangulate_dlt(cameras, pixels, view_ids=None):
    """Linear triangulation from >= 2 views: smallest singular vector of the
    stacked homogeneous system. Returns (point, mean reprojection px)."""
    view_ids = list(range(len(cameras))) if view_ids is None else list(view_ids)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(view_ids) < 2:
        raise TriangulationError("need at least two views")
    _check_ray_geometry(cameras, pixels, view_ids)
    rows = []
    for n, c in enumerate(view_ids):
        P = cameras[c].matrix34()
        r1 = pixels[n, 0] * P[2] - P[0]
        r2 = pixels[n, 1] * P[2] - P[1]
        rows.append(r1 / max(np.linalg.norm(r1), 1e-12))
        rows.append(r2 / max(np.linalg.norm(r2), 1e-12))
    A = np.array(rows)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X):
        raise DegenerateGeometryError("triangulated point at infinity")
    point = X[:3] / X[3]
    errs = _reprojection_px(cameras, point, pixels, view_ids)
    return point, float(np.mean(errs[np.isfinite(errs)])) if np.isfinite(errs).any() else np.inf


def triangulate_ransac(cameras, pixels, threshold_px=4.0, iters=64, seed=0,
                       view_ids=None, keypoint_id=-1):
    """Robust triangulation: 2-view hypotheses, inlier consensus below the
    pixel threshold, final DLT refit on the inliers. Deterministic per seed."""
    view_ids = list(range(len(cameras))) if view_ids is None else list(view_ids)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    M = len(view_ids)
    if M < 2:
        raise TriangulationError("need at least two views")
    rng = np.random.Generator(np.random.Philox(key=seed))
    best_inliers = None
    best_score = (-1, np.inf)
    for _ in range(iters):
        i, j = rng.choice(M, size=2, replace=False)
        try:
            point, _ = triangulate_dlt(
                cameras, pixels[[i, j]], [view_ids[i], view_ids[j]])
        except TriangulationError:
            continue
        errs = _reprojection_px(cameras, point, pixels, view_ids)
        inliers = errs < threshold_px
        count = int(inliers.sum())
        if count < 2:
            continue
        mean_err = float(np.mean(errs[inliers]))
        if (count, -mean_err) > (best_score[0], -best_score[1]):
            best_score = (count, mean_err)
            best_inliers = inliers
        if count == M:
            break
    if best_inliers is None:
        raise TriangulationError(
            f"no 2-view consensus for keypoint {keypoint_id}")
    sel = np.flatnonzero(best_inliers)
    inlier_views = [view_ids[i] for i in sel]
    point, resid = triangulate_dlt(cameras, pixels[sel], inlier_views)
    return TriangulatedPoint(id=keypoint_id, point=point,
                             inlier_views=inlier_views, residual_px=resid)


def temporal_smoothness_residuals(pose_sequence, lambda_smooth, frame_rate=30.0):
    """First differences of consecutive pose vectors, scaled by the frame
    rate relative to 30 Hz; (T-1, D) flattened."""
    seq = np.asarray(pose_sequence, dtype=float)
    if seq.ndim != 2 or seq.shape[0] < 2:
        raise RigfitError("need a (T>=2, D) pose sequence")
    scale = np.sqrt(lambda_smooth) * (frame_rate / 30.0)
    return (scale * np.diff(seq, axis=0)).ravel()


def smooth_tracks(points_per_frame, window=3):
    """Centered moving average over per-frame {id: point} tracks.

    Only full centered windows are averaged; edge frames and frames with
    missing neighbors keep their raw points (an asymmetric average would
    bias moving tracks).
    """
    if window <= 1:
        return points_per_frame
    half = window // 2
    T = len(points_per_frame)
    out = [dict(d) for d in points_per_frame]
    for t in range(half, T - half):
        for i, p in points_per_frame[t].items():
            span = [points_per_frame[s].get(i)
                    for s in range(t - half, t + half + 1)]
            if all(q is not None for q in span):
                out[t][i] = np.mean(span, axis=0)
    return out


def gate_tracks(points_per_frame, gate_m=0.3):
    """Drop per-frame points that are temporal outliers of their track.

    Returns (gated per-frame dicts, list of (t, id) removed). Tracks with
    fewer than 3 frames are left alone.
    """
    T = len(points_per_frame)
    ids = set()
    for d in points_per_frame:
        ids.update(d.keys())
    removed = []
    out = [dict(d) for d in points_per_frame]
    for i in ids:
        ts = [t for t in range(T) if i in points_per_frame[t]]
        if len(ts) < 3:
            continue
        pts = np.array([points_per_frame[t][i] for t in ts])
        med = np.median(pts, axis=0)
        dev = np.linalg.norm(pts - med, axis=1)
        limit = max(gate_m, 8.0 * float(np.median(dev)))
        for t, d in zip(ts, dev):
            if d > limit:
                del out[t][i]
                removed.append((t, i))
    return out, removed


def _rotation_aligning(rest_dirs, world_dirs):
    """Rotation taking each rest direction toward its observed direction
    (least squares; minimal rotation for a single pair)."""
    a = np.asarray(rest_dirs, dtype=float).reshape(-1, 3)
    b = np.asarray(world_dirs, dtype=float).reshape(-1, 3)
    rot, _ = Rotation.align_vectors(b, a)
    return rot.as_matrix()


def init_from_triangulation(rig, tri_per_frame):
    """Initial parameters from triangulated joints.

    Skeleton scales come from median bone lengths across frames; the root
    follows the pelvis; pose comes from closed-form per-bone direction
    alignment walked in topological order.
    """
    T = len(tri_per_frame)
    pts_frames = [{i: tp.point for i, tp in d.items()} for d in tri_per_frame]
    if not any(0 in pts for pts in pts_frames):
        raise RigfitError("pelvis was never triangulated; cannot initialize")
    rest_len = rig.bone_rest_lengths()
    scales = np.ones(rig.n_bones)
    for j in range(1, rig.n_joints):
        p = int(rig.parents[j])
        lens = [np.linalg.norm(pts[j] - pts[p])
                for pts in pts_frames if j in pts and p in pts]
        if lens and rest_len[j - 1] > 1e-12:
            scales[j - 1] = float(np.median(lens)) / rest_len[j - 1]
    scales = np.clip(scales, 0.05, 20.0)

    children = [[] for _ in range(rig.n_joints)]
    for j in range(1, rig.n_joints):
        children[int(rig.parents[j])].append(j)

    params_list = []
    last_root = None
    for t in range(T):
        pts = pts_frames[t]
        pose = np.zeros((rig.n_joints, 3))
        world_rot = [np.eye(3)] * rig.n_joints
        root = pts.get(0, last_root)
        if root is None:
            root = next(p[0] for p in (f.get(0) for f in pts_frames) if p is not None)
        last_root = root
        for j in range(rig.n_joints):
            parent_rot = np.eye(3) if j == 0 else world_rot[int(rig.parents[j])]
            rest_dirs, world_dirs = [], []
            for c in children[j]:
                off = rig.rest_offsets[c]
                if j in pts and c in pts and np.linalg.norm(off) > 1e-12:
                    d_obs = pts[c] - pts[j]
                    nrm = np.linalg.norm(d_obs)
                    if nrm > 1e-9:
                        rest_dirs.append(off / np.linalg.norm(off))
                        world_dirs.append(parent_rot.T @ (d_obs / nrm))
            if rest_dirs:
                Q = _rotation_aligning(rest_dirs, world_dirs)
                pose[j] = Rotation.from_matrix(Q).as_rotvec()
                world_rot[j] = parent_rot @ Q
            else:
                world_rot[j] = parent_rot
        params_list.append(RigParams(
            pose=pose,
            root_translation=np.asarray(root, dtype=float).copy(),
            scales=scales.copy(),
            shape=np.zeros(rig.n_shape),
        ))
    return params_list, scales


class MultiAssembly:
    """Global residual over cameras, shared shape/scales, and per-frame pose."""

    def __init__(self, rig, sequence, prior, config, tri_per_frame, init_list,
                 excluded_obs=None):
        self.rig = rig
        self.seq = sequence
        self.prior = prior
        self.cfg = config
        self.warnings = []
        excluded_obs = excluded_obs or set()
        C = len(sequence.cameras)
        T = len(sequence.frames)
        self.C, self.T = C, T
        blocks = []
        if config.refine_cameras:
            blocks += [(f"cam{c}", 6) for c in range(C)]
        blocks += [("scales", rig.n_bones), ("shape", rig.n_shape)]
        for t in range(T):
            blocks += [(f"pose{t}", rig.n_joints * 3), (f"root{t}", 3)]
        self.layout = ParamLayout(blocks)
        self.use_gmm = prior is not None and config.base.lambda_gmm > 0

        parts = {name: np.zeros(length) for name, length in
                 ((b.name, b.length) for b in self.layout.blocks)}
        # bone scales live in the vector as logs (structural positivity)
        parts["scales"] = np.log(init_list[0].scales)
        parts["shape"] = init_list[0].shape
        for t in range(T):
            parts[f"pose{t}"] = init_list[t].pose
            parts[f"root{t}"] = init_list[t].root_translation
        self.x_init = self.layout.pack(parts)

        # fixed observation arrays per (frame, camera); behind-camera
        # keypoints at the init are dropped with a warning
        base = config.base
        self.obs = {}
        dropped = 0
        excluded = 0
        for t in range(T):
            init_joints = np.asarray(fk_transforms(
                rig, init_list[t].pose, init_list[t].root_translation,
                init_list[t].scales)[1])
            for c in range(C):
                entries = []
                for o in sequence.frames[t][c]:
                    if not o.visible or o.conf <= 0:
                        continue
                    if (t, c, o.id) in excluded_obs:
                        excluded += 1
                        continue
                    if o.id >= VERTEX_ID_BASE:
                        vid = o.id - VERTEX_ID_BASE
                        if vid >= rig.n_vertices:
                            continue
                        entries.append(o)
                        continue
                    if o.id >= rig.n_joints:
                        continue
                    z = project_depths(sequence.cameras[c],
                                       init_joints[o.id][None])[0]
                    if z <= MIN_DEPTH:
                        dropped += 1
                        continue
                    entries.append(o)
                ids = np.array([o.id for o in entries], dtype=int)
                self.obs[(t, c)] = {
                    "ids": ids,
                    "jrows": ids < VERTEX_ID_BASE,
                    "targets": np.array([[o.u, o.v] for o in entries]).reshape(-1, 2),
                    "weight": np.sqrt(base.lambda_kp2d) * np.array(
                        [o.conf * (np.sqrt(base.prompt_upweight) if o.prompt else 1.0)
                         for o in entries]),
                }
        if dropped:
            self.warnings.append(f"dropped {dropped} behind-camera keypoint(s)")
        if excluded:
            self.warnings.append(
                f"excluded {excluded} observation(s) flagged by robust filtering")

        self.tri = []
        for t in range(T):
            d = tri_per_frame[t] if t < len(tri_per_frame) else {}
            ids = sorted(i for i in d if i < rig.n_joints)
            self.tri.append({
                "ids": np.array(ids, dtype=int),
                "pts": np.array([d[i].point for i in ids]).reshape(-1, 3),
            })
        self.init_joints = [np.asarray(fk_transforms(
            rig, p.pose, p.root_translation, p.scales)[1]) for p in init_list]
        self.init_list = init_list
        self.segments = self._row_plan()

    # ---- row bookkeeping ---------------------------------------------------

    def _row_plan(self):
        segs = []
        off = 0

        def add(name, n):
            nonlocal off
            segs.append((name, off, off + n))
            off += n

        J3 = self.rig.n_joints * 3
        for t in range(self.T):
            for c in range(self.C):
                add(f"kp2d/f{t}/c{c}", 2 * len(self.obs[(t, c)]["ids"]))
            add(f"kp3d/f{t}", 3 * len(self.tri[t]["ids"]))
            add(f"anchor_param/f{t}", J3 + 3)
            add(f"anchor_3d/f{t}", J3)
            if self.use_gmm:
                add(f"gmm/f{t}", 1)
            add(f"limits/f{t}", J3)
        add("anchor_shared", self.rig.n_bones + self.rig.n_shape)
        add("shape_l2", self.rig.n_shape)
        if self.T >= 2:
            add("smooth", (self.T - 1) * (J3 + 3))
            if self.cfg.second_diff and self.T >= 3:
                add("smooth2", (self.T - 2) * (J3 + 3))
        return segs

    def seg_slice(self, name):
        for n, a, b in self.segments:
            if n == name:
                return slice(a, b)
        raise KeyError(name)

    @property
    def n_rows(self):
        return self.segments[-1][2] if self.segments else 0

    def _camera_rt(self, parts, c):
        delta = parts.get(f"cam{c}")
        return camera_pose_from_delta(delta, self.seq.cameras[c])

    def frame_rows(self, t, parts):
        """Residual rows of frame t, in row-plan order (dual-generic)."""
        rig, base = self.rig, self.cfg.base
        pose = parts[f"pose{t}"].reshape((rig.n_joints, 3))
        root = parts[f"root{t}"]
        scales = dm.exp(parts["scales"])
        shape = parts["shape"]
        Rg, tg = fk_transforms(rig, pose, root, scales)
        rows = []
        for c in range(self.C):
            ob = self.obs[(t, c)]
            if not len(ob["ids"]):
                continue
            cam = self.seq.cameras[c]
            cam_R, cam_t = self._camera_rt(parts, c)
            pts = self._points_for(ob, Rg, tg, shape)
            uv = project_clamped(cam_R, cam_t,
                                 (cam.fx, cam.fy, cam.cx, cam.cy), pts)
            delta = uv - ob["targets"]
            robust = huber_norm(delta, base.huber_delta)
            rows.append((robust * ob["weight"][:, None]).ravel())
        tri = self.tri[t]
        if len(tri["ids"]):
            diff = tg[tri["ids"]] - tri["pts"]
            rows.append((diff * np.sqrt(self.cfg.lambda_kp3d)).ravel())
        rows.append(dm.concat([
            (pose.ravel() - self.init_list[t].pose.ravel()),
            (root - self.init_list[t].root_translation),
        ]) * np.sqrt(base.lambda_anchor_param))
        rows.append(((tg - self.init_joints[t])
                     * np.sqrt(base.lambda_anchor_3d)).ravel())
        if self.use_gmm:
            nll = gmm_nll(self.prior, pose[1:].ravel())
            arg = 2.0 * (nll - self.prior.nll_lower_bound) + 1e-12
            g = dm.sqrt(arg) * np.sqrt(base.lambda_gmm)
            rows.append(g.reshape((1,)) if isinstance(g, Dual) else np.atleast_1d(g))
        rows.append(joint_limit_residuals(pose, rig.joint_limits)
                    * np.sqrt(base.lambda_limits))
        return dm.concat(rows)

    def _points_for(self, ob, Rg, tg, shape):
        if bool(ob["jrows"].all()):
            return tg[ob["ids"]]
        vids = np.unique(ob["ids"][~ob["jrows"]]) - VERTEX_ID_BASE
        verts = skin_vertices_from(self.rig, Rg, tg, shape, vertex_ids=vids)
        vpos = {v: i for i, v in enumerate(vids)}
        jrows = np.flatnonzero(ob["jrows"])
        vrows = np.flatnonzero(~ob["jrows"])
        vsel = np.array([vpos[i - VERTEX_ID_BASE] for i in ob["ids"][vrows]], int)
        stacked = dm.concat_rows([tg[ob["ids"][jrows]], verts[vsel]])
        perm = np.empty(len(ob["ids"]), dtype=int)
        perm[jrows] = np.arange(len(jrows))
        perm[vrows] = len(jrows) + np.arange(len(vrows))
        return stacked[perm]

    def shared_rows(self, parts):
        base = self.cfg.base
        anchor = dm.concat([
            parts["scales"] - np.log(self.init_list[0].scales),
            parts["shape"] - self.init_list[0].shape,
        ]) * np.sqrt(base.lambda_anchor_param)
        return dm.concat([anchor, parts["shape"] * np.sqrt(base.lambda_shape_l2)])

    def smooth_scale(self):
        return np.sqrt(self.cfg.lambda_smooth) * (self.seq.frame_rate / 30.0)

    def smooth_rows(self, parts):
        if self.T < 2:
            return None
        c = self.smooth_scale()
        frames = [dm.concat([parts[f"pose{t}"], parts[f"root{t}"]])
                  for t in range(self.T)]
        rows = [(frames[t] - frames[t - 1]) * c for t in range(1, self.T)]
        if self.cfg.second_diff and self.T >= 3:
            rows += [(frames[t + 1] - frames[t] * 2.0 + frames[t - 1]) * c
                     for t in range(1, self.T - 1)]
        return dm.concat(rows)

    def residuals(self, x):
        parts = self.layout.unpack(x)
        rows = [self.frame_rows(t, parts) for t in range(self.T)]
        rows.append(self.shared_rows(parts))
        sm = self.smooth_rows(parts)
        if sm is not None:
            rows.append(sm)
        return dm.concat(rows)

    # ---- structured Jacobian for the pose block ----------------------------

    def _dims_of(self, *names):
        return np.concatenate([
            np.arange(self.layout.slice(n).start, self.layout.slice(n).stop)
            for n in names
        ])

    def _frame_dims(self, t):
        return self._dims_of(f"pose{t}", f"root{t}")

    def jacobian_structured(self, x, include_shared=False):
        """Jacobian assembled from per-frame forward-mode sub-evaluations
        (each frame's rows depend only on its own pose/root plus the shared
        and camera dims) and analytic smoothness/regularizer rows."""
        x = np.asarray(x, dtype=float)
        J = np.zeros((self.n_rows, self.layout.total))
        shared_names = ["scales", "shape"] + (
            [f"cam{c}" for c in range(self.C)] if self.cfg.refine_cameras else [])
        row = 0
        for t in range(self.T):
            dims = self._frame_dims(t)
            if include_shared:
                dims = np.concatenate([dims, self._dims_of(*shared_names)])
            xd = Dual.seed(x, dims)
            parts = self.layout.unpack(xd)
            out = self.frame_rows(t, parts)
            m = np.size(dm.value(out))
            if isinstance(out, Dual):
                J[row:row + m, dims] = out.eps.reshape(m, len(dims))
            row += m
        # shared regularizer rows are linear: anchors then shape L2
        base = self.cfg.base
        n_sc = self.layout.block("scales").length
        n_sh = self.rig.n_shape
        if include_shared:
            sc_cols = self._dims_of("scales")
            sh_cols = self._dims_of("shape")
            J[row:row + n_sc, sc_cols] = np.sqrt(base.lambda_anchor_param) * np.eye(n_sc)
            J[row + n_sc:row + n_sc + n_sh, sh_cols] = (
                np.sqrt(base.lambda_anchor_param) * np.eye(n_sh))
            J[row + n_sc + n_sh:row + n_sc + 2 * n_sh, sh_cols] = (
                np.sqrt(base.lambda_shape_l2) * np.eye(n_sh))
        row += n_sc + 2 * n_sh
        if self.T >= 2:
            c = self.smooth_scale()
            D = self.rig.n_joints * 3 + 3
            eye = c * np.eye(D)
            for t in range(1, self.T):
                J[row:row + D, self._frame_dims(t)] = eye
                J[row:row + D, self._frame_dims(t - 1)] = -eye
                row += D
            if self.cfg.second_diff and self.T >= 3:
                for t in range(1, self.T - 1):
                    J[row:row + D, self._frame_dims(t + 1)] = eye
                    J[row:row + D, self._frame_dims(t)] = -2.0 * eye
                    J[row:row + D, self._frame_dims(t - 1)] = eye
                    row += D
        assert row == self.n_rows
        return J

    def breakdown(self, x):
        r = dm.value(self.residuals(np.asarray(x, dtype=float)))
        per, counts = {}, {}
        for name, a, b in self.segments:
            per[name] = 0.5 * float(r[a:b] @ r[a:b])
            counts[name] = b - a
        return per, counts, 0.5 * float(r @ r)


class _StructuredProblem:
    def __init__(self, asm, include_shared=False):
        self.asm = asm
        self.layout = asm.layout
        self.include_shared = include_shared

    def residuals(self, x):
        return np.atleast_1d(dm.value(self.asm.residuals(np.asarray(x, float))))

    def jacobian(self, x):
        return self.asm.jacobian_structured(x, include_shared=self.include_shared)

    def cost(self, x):
        r = self.residuals(x)
        return 0.5 * float(r @ r)


def triangulate_sequence(rig, sequence, config):
    """Per-frame robust triangulations of joint keypoints; returns
    (per-frame {id: TriangulatedPoint}, warnings)."""
    warnings = []
    rcfg = config.ransac
    out = []
    for t, views in enumerate(sequence.frames):
        per_id = {}
        for j in range(rig.n_joints):
            view_ids, pix = [], []
            for c, obs in enumerate(views):
                for o in obs:
                    if o.id == j and o.visible and o.conf > 0:
                        view_ids.append(c)
                        pix.append([o.u, o.v])
            if len(view_ids) < 2:
                continue
            try:
                tp = triangulate_ransac(
                    sequence.cameras, pix, threshold_px=rcfg.threshold_px,
                    iters=rcfg.iters,
                    seed=np.random.SeedSequence([rcfg.seed, t, j]).generate_state(1)[0],
                    view_ids=view_ids, keypoint_id=j)
                per_id[j] = tp
            except TriangulationError as e:
                warnings.append(f"frame {t} keypoint {j}: {e}")
        out.append(per_id)
    return out, warnings


def fit_multi_view(rig, sequence, prior=None, config=None):
    """Alternating block optimization over a camera/shape/pose schedule."""
    config = config or MultiFitConfig()
    config.base.validate()
    T = len(sequence.frames)
    if T < 1:
        raise UnderConstrainedError("need at least one frame")
    if len(sequence.cameras) < 2 and config.init is None:
        raise UnderConstrainedError(
            "need >= 2 cameras (or explicit init params for single-camera use)")

    warnings = []
    tri_per_frame = [{} for _ in range(T)]
    excluded_obs = set()
    if len(sequence.cameras) >= 2:
        tri_per_frame, tri_warn = triangulate_sequence(rig, sequence, config)
        warnings += tri_warn
        tracks = [{i: tp.point for i, tp in d.items()} for d in tri_per_frame]
        tracks, removed = gate_tracks(tracks, gate_m=config.track_gate_m)
        if removed:
            warnings.append(
                f"dropped {len(removed)} temporally inconsistent triangulation(s)")
        # views voted out by RANSAC are excluded from the 2D term as well;
        # gated (temporally inconsistent) triangulations take their whole
        # frame's observations of that keypoint with them
        for t in range(T):
            for i, tp in tri_per_frame[t].items():
                inset = set(tp.inlier_views)
                for c in range(len(sequence.cameras)):
                    if c not in inset:
                        excluded_obs.add((t, c, i))
        for t, i in removed:
            for c in range(len(sequence.cameras)):
                excluded_obs.add((t, c, i))
        smoothed = smooth_tracks(
            tracks, window=config.track_smooth_window if T >= 3 else 1)
        gated = []
        for t in range(T):
            d = {}
            for i, p in smoothed[t].items():
                tp = tri_per_frame[t][i]
                d[i] = TriangulatedPoint(id=tp.id, point=p,
                                         inlier_views=tp.inlier_views,
                                         residual_px=tp.residual_px)
            gated.append(d)
        tri_per_frame = gated
    missing = sum(rig.n_joints - len(d) for d in tri_per_frame)
    if missing and config.lambda_kp3d > 0:
        warnings.append(
            f"{missing} joint/frame triangulations unavailable; their 3D "
            "terms are dropped")

    if config.init is not None:
        init_list = [p.copy() for p in config.init]
        if len(init_list) == 1 and T > 1:
            init_list = [init_list[0].copy() for _ in range(T)]
    else:
        init_list, _ = init_from_triangulation(rig, tri_per_frame)

    asm = MultiAssembly(rig, sequence, prior, config, tri_per_frame, init_list,
                        excluded_obs=excluded_obs)
    warnings += asm.warnings
    layout = asm.layout
    problem = ResidualProblem(asm.residuals, layout, mode="forward")
    pose_problem = _StructuredProblem(asm, include_shared=False)

    x = asm.x_init.copy()
    pose_blocks = [n for t in range(T) for n in (f"pose{t}", f"root{t}")]
    cam_blocks = [f"cam{c}" for c in range(asm.C)] if config.refine_cameras else []
    round_costs = [problem.cost(x)]
    converged = False
    for _ in range(config.max_rounds):
        if cam_blocks:
            layout.freeze_all_except(*cam_blocks)
            x = solve_lm(problem, x, config.lm_cameras).x
        layout.freeze_all_except("scales", "shape")
        x = solve_lm(problem, x, config.lm_shared).x
        layout.freeze_all_except(*pose_blocks)
        x = solve_lm(pose_problem, x, config.lm_pose).x
        cost = problem.cost(x)
        rel = (round_costs[-1] - cost) / max(round_costs[-1], 1e-300)
        round_costs.append(cost)
        if rel < config.block_tol:
            converged = True
            break
    layout.frozen = set()
    if config.final_polish:
        sol = solve_lm(_StructuredProblem(asm, include_shared=True), x,
                       config.lm_polish)
        x = sol.x
        converged = converged or sol.converged
        round_costs.append(sol.cost)

    parts = layout.unpack(x)
    scales = np.exp(np.array(parts["scales"]))
    shape = np.array(parts["shape"])
    per, counts, total = asm.breakdown(x)
    cameras_out = []
    for c, cam in enumerate(sequence.cameras):
        if config.refine_cameras:
            R, t = camera_pose_from_delta(np.asarray(parts[f"cam{c}"]), cam)
            cameras_out.append(dataclasses.replace(cam, rotation=R, translation=t))
        else:
            cameras_out.append(cam)
    frames = []
    for t in range(T):
        fparams = RigParams(
            pose=np.array(parts[f"pose{t}"]).reshape(rig.n_joints, 3),
            root_translation=np.array(parts[f"root{t}"]),
            scales=scales, shape=shape)
        fper = {k: v for k, v in per.items() if k.endswith(f"/f{t}")}
        fcounts = {k: v for k, v in counts.items() if k.endswith(f"/f{t}")}
        frames.append(FitResult(
            params=fparams, per_term=fper, counts=fcounts,
            total_cost=sum(fper.values()), cost_trace=[], converged=converged,
            iterations=len(round_costs) - 1))
    return MultiFitResult(
        frames=frames, scales=scales, shape=shape, cameras=cameras_out,
        total_cost=total, round_costs=round_costs, converged=converged,
        triangulated=tri_per_frame, warnings=warnings)
