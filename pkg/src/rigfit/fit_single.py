"""Single-image fitting: composite-loss assembly and optimization.

The residual vector concatenates, in order: robustified 2D reprojection
terms (confidence-weighted, prompted keypoints upweighted), parameter and
3D-joint anchors tying the fit to its initialization, the mixture-prior
term, the shape L2 regularizer, and joint-limit hinges. Per-term costs in
the result always sum to the total cost.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import project_clamped, project_depths, MIN_DEPTH
from .errors import DimensionMismatchError, RigfitError, UnderConstrainedError
from .optim import dual as dm
from .optim.dual import Dual
from .optim.layout import ParamLayout
from .optim.problem import ResidualProblem
from .optim.robust import huber_norm
from .optim.solvers import (FirstOrderConfig, LMConfig, solve_first_order,
                            solve_lm)
from .priors import gmm_nll, joint_limit_residuals
from .rig import RigParams, fk_transforms, skin_vertices_from

# observation ids >= this refer to template vertices, below to joints
VERTEX_ID_BASE = 1000


@dataclass
class Observation2D:
    id: int
    u: float
    v: float
    conf: float = 1.0
    visible: bool = True
    prompt: bool = False

    def __post_init__(self):
        if not 0.0 <= self.conf <= 1.0:
            raise RigfitError(f"confidence {self.conf} outside [0, 1]")


@dataclass
class FitConfig:
    lambda_kp2d: float = 1.0
    lambda_anchor_param: float = 1e-2
    lambda_anchor_3d: float = 1e-1
    lambda_gmm: float = 1e-3
    lambda_shape_l2: float = 1e-2
    lambda_limits: float = 1.0
    prompt_upweight: float = 10.0
    huber_delta: float = 5.0
    # graduated robustification: LM stages at huber_delta * m for each
    # multiplier; a wide first stage keeps large initial errors in the
    # quadratic regime (a tight delta alone stalls Gauss-Newton steps)
    huber_stages: tuple = (8.0, 1.0)
    solver: str = "lm"
    lm: LMConfig = field(default_factory=LMConfig)
    first_order: FirstOrderConfig = field(default_factory=FirstOrderConfig)
    unfreeze_camera: bool = False
    freeze_blocks: tuple = ()
    allow_underconstrained: bool = False

    def validate(self):
        for name in ("lambda_kp2d", "lambda_anchor_param", "lambda_anchor_3d",
                     "lambda_gmm", "lambda_shape_l2", "lambda_limits"):
            if getattr(self, name) < 0:
                raise RigfitError(f"{name} must be nonnegative")
        if self.prompt_upweight < 1.0:
            raise RigfitError("prompt_upweight must be >= 1")
        if self.huber_delta <= 0:
            raise RigfitError("huber_delta must be positive")
        if not self.huber_stages or self.huber_stages[-1] != 1.0 or any(
                m < 1.0 for m in self.huber_stages):
            raise RigfitError("huber_stages must be multipliers >= 1 ending in 1.0")
        if self.solver not in ("lm", "first_order"):
            raise RigfitError(f"unknown solver {self.solver!r}")


@dataclass
class FitResult:
    params: RigParams
    per_term: dict
    counts: dict
    total_cost: float
    cost_trace: list
    converged: bool
    iterations: int
    warnings: list = field(default_factory=list)


def pose_blocks(rig):
    """Pose split into body/hand blocks when the hand subtrees are contiguous
    index ranges; otherwise a single pose block."""
    left, right = rig.hand_subtrees
    lj, rj = sorted(left.joints), sorted(right.joints)
    contiguous = (
        lj == list(range(lj[0], lj[0] + len(lj)))
        and rj == list(range(rj[0], rj[0] + len(rj)))
        and rj[-1] == rig.n_joints - 1
        and rj[0] == lj[-1] + 1
    )
    if not contiguous:
        return [("pose", rig.n_joints * 3, 0)]
    return [
        ("pose_body", lj[0] * 3, 0),
        ("pose_lhand", len(lj) * 3, lj[0]),
        ("pose_rhand", len(rj) * 3, rj[0]),
    ]


def make_layout(rig, unfreeze_camera=False):
    blocks = [(name, length) for name, length, _ in pose_blocks(rig)]
    blocks += [("root_t", 3), ("scales", rig.n_bones), ("shape", rig.n_shape)]
    if unfreeze_camera:
        blocks.append(("camera", 6))
    return ParamLayout(blocks)


def pack_params(layout, params, rig):
    """Flatten params into the layout; bone scales are stored as logs so
    positivity is structural during optimization."""
    parts = {}
    for name, length, start in pose_blocks(rig):
        parts[name] = params.pose[start:start + length // 3]
    parts["root_t"] = params.root_translation
    parts["scales"] = np.log(params.scales)
    parts["shape"] = params.shape
    if "camera" in layout:
        parts["camera"] = np.zeros(6)
    return layout.pack(parts)


def unpack_params(layout, x, rig):
    """Split a flat vector (or Dual) into pose/root/scales/shape (+camera)."""
    parts = layout.unpack(x)
    if "pose" in parts:
        pose = parts["pose"]
    else:
        pose = dm.concat([parts["pose_body"], parts["pose_lhand"], parts["pose_rhand"]])
    pose = pose.reshape((rig.n_joints, 3))
    scales = dm.exp(parts["scales"])
    return pose, parts["root_t"], scales, parts["shape"], parts.get("camera")


def params_from_vector(layout, x, rig):
    pose, root, scales, shape, _ = unpack_params(layout, np.asarray(x, float), rig)
    return RigParams(pose=np.array(pose), root_translation=np.array(root),
                     scales=np.array(scales), shape=np.array(shape))


def camera_pose_from_delta(delta, camera):
    """Extrinsics perturbed by a 6-vector [axis-angle, translation] delta."""
    if delta is None:
        return camera.rotation, camera.translation
    rot_delta = delta[:3]
    if isinstance(rot_delta, Dual):
        Rv, Re = kernels.rodrigues_dual(rot_delta.val.reshape(1, 3),
                                        rot_delta.eps.reshape(1, 3, -1))
        Rd = Dual(Rv[0], Re[0])
    else:
        Rd = kernels.rodrigues(np.asarray(rot_delta, float).reshape(1, 3))[0]
    return dm.matmul(Rd, camera.rotation), camera.translation + delta[3:]


def world_points(rig, params, ids):
    """3D points (joints or skinned vertices) for a list of keypoint ids."""
    Rg, tg = fk_transforms(rig, params.pose, params.root_translation, params.scales)
    vids = sorted({i - VERTEX_ID_BASE for i in ids if i >= VERTEX_ID_BASE})
    verts = None
    if vids:
        verts = skin_vertices_from(rig, Rg, tg, params.shape,
                                   vertex_ids=np.array(vids, dtype=int))
    vmap = {v: i for i, v in enumerate(vids)}
    pts = [verts[vmap[i - VERTEX_ID_BASE]] if i >= VERTEX_ID_BASE else tg[i]
           for i in ids]
    return np.array(pts).reshape(-1, 3)


class SingleViewAssembly:
    """Residual evaluator for one image; fixed structure after construction."""

    def __init__(self, rig, camera, observations, init_params, prior, config):
        self.rig = rig
        self.camera = camera
        self.prior = prior
        self.config = config
        self.warnings = []
        self.layout = make_layout(rig, config.unfreeze_camera)
        for name in config.freeze_blocks:
            self.layout.freeze(name)
        self.x_init = pack_params(self.layout, init_params, rig)
        self.anchor_idx = np.array([
            i for b in self.layout.blocks if b.name != "camera"
            for i in range(b.offset, b.offset + b.length)
        ], dtype=int)

        usable = []
        dropped = 0
        for o in observations:
            if not o.visible or o.conf <= 0.0:
                continue
            if o.id < 0 or (o.id >= rig.n_joints and o.id < VERTEX_ID_BASE) or (
                    o.id >= VERTEX_ID_BASE + rig.n_vertices):
                raise DimensionMismatchError(f"unknown keypoint id {o.id}")
            usable.append(o)
        # keypoints starting behind the camera are dropped, not crashed on
        init_pts = world_points(rig, init_params, [o.id for o in usable])
        if len(usable):
            depths = project_depths(camera, init_pts)
            kept = []
            for o, z in zip(usable, depths):
                if z <= MIN_DEPTH:
                    dropped += 1
                else:
                    kept.append(o)
            usable = kept
        if dropped:
            self.warnings.append(f"dropped {dropped} behind-camera keypoint(s)")
        self.dropped_behind = dropped

        self.obs = usable
        self.kp_ids = np.array([o.id for o in usable], dtype=int)
        self.targets = np.array([[o.u, o.v] for o in usable], dtype=float).reshape(-1, 2)
        up = np.array([config.prompt_upweight if o.prompt else 1.0 for o in usable])
        conf = np.array([o.conf for o in usable])
        self.kp_weight = np.sqrt(config.lambda_kp2d * up) * conf
        self.joint_rows = self.kp_ids < VERTEX_ID_BASE
        self.vertex_ids = np.unique(self.kp_ids[~self.joint_rows]) - VERTEX_ID_BASE
        self.init_joints = np.asarray(
            fk_transforms(rig, init_params.pose, init_params.root_translation,
                          init_params.scales)[1])
        self.use_gmm = prior is not None and config.lambda_gmm > 0
        self.segments = self._row_plan()

    def _row_plan(self):
        segs = []
        off = 0

        def add(name, n):
            nonlocal off
            segs.append((name, off, off + n))
            off += n

        add("kp2d", 2 * len(self.obs))
        add("anchor_param", len(self.anchor_idx))
        add("anchor_3d", 3 * self.rig.n_joints)
        if self.use_gmm:
            add("gmm", 1)
        add("shape_l2", self.rig.n_shape)
        add("limits", 3 * self.rig.n_joints)
        return segs

    @property
    def n_rows(self):
        return self.segments[-1][2]

    def residuals(self, x):
        rig, cfg = self.rig, self.config
        pose, root, scales, shape, cam_delta = unpack_params(self.layout, x, rig)
        Rg, tg = fk_transforms(rig, pose, root, scales)
        cam_R, cam_t = camera_pose_from_delta(cam_delta, self.camera)
        intr = (self.camera.fx, self.camera.fy, self.camera.cx, self.camera.cy)

        parts = []
        if len(self.obs):
            pts = self._gather_points(Rg, tg, shape)
            uv = project_clamped(cam_R, cam_t, intr, pts)
            delta_px = uv - self.targets
            robust = huber_norm(delta_px, cfg.huber_delta)
            parts.append((robust * self.kp_weight[:, None]).ravel())
        else:
            parts.append(np.zeros(0))

        parts.append((x[self.anchor_idx] - self.x_init[self.anchor_idx])
                     * np.sqrt(cfg.lambda_anchor_param))
        parts.append(((tg - self.init_joints) * np.sqrt(cfg.lambda_anchor_3d)).ravel())
        if self.use_gmm:
            nll = gmm_nll(self.prior, pose[1:].ravel())
            arg = 2.0 * (nll - self.prior.nll_lower_bound) + 1e-12
            g = dm.sqrt(arg) * np.sqrt(cfg.lambda_gmm)
            parts.append(g.reshape((1,)) if isinstance(g, Dual) else np.atleast_1d(g))
        parts.append(shape * np.sqrt(cfg.lambda_shape_l2))
        parts.append(joint_limit_residuals(pose, rig.joint_limits)
                     * np.sqrt(cfg.lambda_limits))
        return dm.concat(parts)

    def _gather_points(self, Rg, tg, shape):
        if not self.vertex_ids.size:
            return tg[self.kp_ids]
        verts = skin_vertices_from(self.rig, Rg, tg, shape,
                                   vertex_ids=self.vertex_ids)
        jrows = np.flatnonzero(self.joint_rows)
        vrows = np.flatnonzero(~self.joint_rows)
        vpos = {v: i for i, v in enumerate(self.vertex_ids)}
        vsel = np.array([vpos[i - VERTEX_ID_BASE] for i in self.kp_ids[vrows]],
                        dtype=int)
        stacked = dm.concat_rows([tg[self.kp_ids[jrows]], verts[vsel]])
        perm = np.empty(len(self.kp_ids), dtype=int)
        perm[jrows] = np.arange(len(jrows))
        perm[vrows] = len(jrows) + np.arange(len(vrows))
        return stacked[perm]

    def breakdown(self, x):
        """Per-term half-squared costs at x; keys follow the row plan."""
        r = dm.value(self.residuals(np.asarray(x, float)))
        per = {}
        counts = {}
        for name, a, b in self.segments:
            per[name] = 0.5 * float(r[a:b] @ r[a:b])
            counts[name] = b - a
        counts["kp2d_pairs"] = len(self.obs)
        return per, counts, 0.5 * float(r @ r)


def fit_single_view(rig, init_params, camera, observations, prior=None, config=None):
    """Optimize rig parameters against one image's 2D observations."""
    config = config or FitConfig()
    config.validate()
    init_params.validate(rig)
    n_visible = sum(1 for o in observations if o.visible and o.conf > 0)
    if n_visible < 4 and not config.allow_underconstrained:
        raise UnderConstrainedError(
            f"only {n_visible} visible keypoints (need >= 4)")
    stages = config.huber_stages if config.solver == "lm" else (1.0,)
    x = None
    trace = []
    iterations = 0
    asm = None
    for mult in stages:
        cfg_s = (config if mult == 1.0 else
                 dataclasses.replace(config, huber_delta=config.huber_delta * mult))
        asm = SingleViewAssembly(rig, camera, observations, init_params, prior, cfg_s)
        problem = ResidualProblem(asm.residuals, asm.layout, mode="forward")
        if x is None:
            x = asm.x_init.copy()
        if config.solver == "lm":
            sol = solve_lm(problem, x, config.lm)
        else:
            sol = solve_first_order(problem, x, config.first_order)
        x = sol.x
        trace.extend(sol.cost_trace)
        iterations += sol.iterations
    # the contract is against the configured objective: never return worse
    # than the initialization
    final_problem = ResidualProblem(asm.residuals, asm.layout, mode="forward")
    if final_problem.cost(x) > final_problem.cost(asm.x_init):
        x = asm.x_init.copy()
    per, counts, total = asm.breakdown(x)
    return FitResult(
        params=params_from_vector(asm.layout, x, rig),
        per_term=per,
        counts=counts,
        total_cost=total,
        cost_trace=trace,
        converged=sol.converged,
        iterations=iterations,
        warnings=list(asm.warnings),
    )


def prompted_refine(rig, params, camera, prompts, config=None, prior=None):
    """Refine around the current estimate using prompt keypoints only.

    Each prompt is (keypoint_id, (u, v)). The prompt terms are upweighted and
    everything else is held by the initialization anchors.
    """
    if not prompts:
        raise UnderConstrainedError("at least one prompt is required")
    config = config or FitConfig()
    obs = [Observation2D(id=int(i), u=float(uv[0]), v=float(uv[1]),
                         conf=1.0, visible=True, prompt=True)
           for i, uv in prompts]
    cfg = dataclasses.replace(config, allow_underconstrained=True)
    return fit_single_view(rig, params, camera, obs, prior=prior, config=cfg)


def reprojection_errors(rig, params, camera, observations):
    """Pixel error per visible observation at the given parameters."""
    vis = [o for o in observations if o.visible and o.conf > 0]
    if not vis:
        return np.zeros(0)
    pts = world_points(rig, params, [o.id for o in vis])
    uv = project_clamped(camera.rotation, camera.translation,
                         (camera.fx, camera.fy, camera.cx, camera.cy), pts)
    targets = np.array([[o.u, o.v] for o in vis])
    return np.linalg.norm(np.asarray(uv) - targets, axis=1)
