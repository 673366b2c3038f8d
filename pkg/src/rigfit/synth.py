"""Deterministic synthetic scenes: default rig, parameter sampling, and
2D observation rendering with controllable noise/outliers/occlusion.

Everything is a pure function of (seed, config); randomness comes from the
counter-based Philox generator so runs are reproducible bit-for-bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import camera_ring, project_depths, MIN_DEPTH
from .errors import RigfitError
from .fit_single import VERTEX_ID_BASE, Observation2D
from .rig import HandSubtree, KinematicRig, RigParams, forward_kinematics, skin_vertices

BODY_LIMIT = 2.8
FINGER_LIMIT = 1.6

# (name, parent, rest offset in the parent's frame, capsule radius)
_BODY_JOINTS = [
    ("pelvis", -1, (0.0, 0.0, 0.0), 0.12),
    ("l_hip", 0, (0.09, -0.07, 0.0), 0.08),
    ("r_hip", 0, (-0.09, -0.07, 0.0), 0.08),
    ("spine1", 0, (0.0, 0.12, 0.0), 0.13),
    ("l_knee", 1, (0.0, -0.45, 0.0), 0.07),
    ("r_knee", 2, (0.0, -0.45, 0.0), 0.07),
    ("spine2", 3, (0.0, 0.13, 0.0), 0.13),
    ("l_ankle", 4, (0.0, -0.45, 0.0), 0.055),
    ("r_ankle", 5, (0.0, -0.45, 0.0), 0.055),
    ("spine3", 6, (0.0, 0.13, 0.0), 0.13),
    ("l_heel", 7, (0.0, -0.07, -0.05), 0.03),
    ("r_heel", 8, (0.0, -0.07, -0.05), 0.03),
    ("l_big_toe", 7, (0.0, -0.07, 0.13), 0.03),
    ("r_big_toe", 8, (0.0, -0.07, 0.13), 0.03),
    ("l_small_toe", 7, (0.05, -0.07, 0.11), 0.025),
    ("r_small_toe", 8, (-0.05, -0.07, 0.11), 0.025),
    ("neck", 9, (0.0, 0.15, 0.0), 0.05),
    ("l_shoulder", 9, (0.18, 0.08, 0.0), 0.06),
    ("r_shoulder", 9, (-0.18, 0.08, 0.0), 0.06),
    ("head", 16, (0.0, 0.15, 0.0), 0.09),
    ("l_elbow", 17, (0.27, 0.0, 0.0), 0.045),
    ("r_elbow", 18, (-0.27, 0.0, 0.0), 0.045),
    ("l_wrist", 20, (0.25, 0.0, 0.0), 0.04),
    ("r_wrist", 21, (-0.25, 0.0, 0.0), 0.04),
]

# per-finger chains in the wrist frame; x points along the arm
_FINGERS = [
    ("thumb", [(0.03, -0.01, 0.03), (0.03, 0.0, 0.015), (0.025, 0.0, 0.01)]),
    ("index", [(0.09, 0.0, 0.025), (0.035, 0.0, 0.0), (0.025, 0.0, 0.0)]),
    ("middle", [(0.09, 0.0, 0.005), (0.04, 0.0, 0.0), (0.028, 0.0, 0.0)]),
    ("ring", [(0.085, 0.0, -0.015), (0.035, 0.0, 0.0), (0.025, 0.0, 0.0)]),
    ("pinky", [(0.08, 0.0, -0.035), (0.03, 0.0, 0.0), (0.02, 0.0, 0.0)]),
]

_TORSO = {"spine1", "spine2", "spine3", "neck", "head"}
_LIMBS = {"l_knee", "r_knee", "l_ankle", "r_ankle", "l_elbow", "r_elbow",
          "l_wrist", "r_wrist", "l_hip", "r_hip"}

KEYPOINT_MAPS = {
    "body24": list(range(24)),
    "body17": [19, 16, 17, 18, 20, 21, 22, 23, 9, 3, 0, 1, 2, 4, 5, 7, 8],
    "feet6": [10, 12, 14, 11, 13, 15],
}


def _joint_table():
    joints = list(_BODY_JOINTS)
    subtrees = {}
    for side, wrist, sign in (("left", 22, 1.0), ("right", 23, -1.0)):
        members = []
        for fname, segs in _FINGERS:
            parent = wrist
            for k, off in enumerate(segs):
                idx = len(joints)
                joints.append((
                    f"{'l' if side == 'left' else 'r'}_{fname}{k + 1}",
                    parent,
                    (sign * off[0], off[1], off[2]),
                    0.009,
                ))
                members.append(idx)
                parent = idx
        subtrees[side] = HandSubtree(side=side, wrist=wrist, joints=tuple(members))
    return joints, (subtrees["left"], subtrees["right"])


def _bone_frame(axis):
    a = axis / np.linalg.norm(axis)
    h = np.zeros(3)
    h[np.argmin(np.abs(a))] = 1.0
    e1 = np.cross(a, h)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return a, e1, e2


def make_default_rig(seed=0):
    """Desk-scale rig: 24 body joints + 15 per hand, capsule-ring surface,
    10 procedural shape blendshapes."""
    joints, subtrees = _joint_table()
    names = tuple(j[0] for j in joints)
    parents = np.array([j[1] for j in joints], dtype=np.int64)
    offsets = np.array([j[2] for j in joints], dtype=float)
    radii = np.array([j[3] for j in joints], dtype=float)
    J = len(joints)

    limits = np.empty((J, 3, 2))
    for j, name in enumerate(names):
        lim = BODY_LIMIT if j < 24 else FINGER_LIMIT
        limits[j] = [[-lim, lim]] * 3

    # capsule rings: 2 rings x 8 vertices per bone, stored in the parent
    # joint's frame; the outer ring blends toward the child joint and its
    # stored center is pre-shifted so the blended rest position lands on the
    # bone axis
    ring_ts = (0.35, 0.75)
    child_w = 0.3
    n_ring = 8
    verts = []
    skin_idx = []
    skin_w = []
    radial_dirs = []
    bone_of_vertex = []
    for j in range(1, J):
        p = int(parents[j])
        axis, e1, e2 = _bone_frame(offsets[j])
        for ti, t in enumerate(ring_ts):
            blend = child_w if ti == 1 else 0.0
            center = (t - blend) * offsets[j]
            for k in range(n_ring):
                ang = 2.0 * math.pi * k / n_ring
                rdir = math.cos(ang) * e1 + math.sin(ang) * e2
                verts.append(center + radii[j] * rdir)
                radial_dirs.append(rdir)
                bone_of_vertex.append(j)
                if blend > 0:
                    skin_idx.append([p, j])
                    skin_w.append([1.0 - blend, blend])
                else:
                    skin_idx.append([p, p])
                    skin_w.append([1.0, 0.0])
    verts = np.array(verts)
    radial_dirs = np.array(radial_dirs)
    bone_of_vertex = np.array(bone_of_vertex)
    V = len(verts)

    rng = np.random.Generator(np.random.Philox(key=seed))
    basis = np.zeros((10, V, 3))
    torso_mask = np.array([names[b] in _TORSO for b in bone_of_vertex])
    limb_mask = np.array([names[b] in _LIMBS for b in bone_of_vertex])
    upper_mask = np.array([b >= 16 and b < 24 for b in bone_of_vertex])
    leg_mask = np.array([names[b].endswith(("hip", "knee", "ankle"))
                         for b in bone_of_vertex])
    basis[0] = 0.02 * radial_dirs
    basis[1] = 0.025 * radial_dirs * limb_mask[:, None]
    basis[2] = 0.03 * radial_dirs * torso_mask[:, None]
    basis[3] = 0.02 * radial_dirs * upper_mask[:, None]
    basis[4] = 0.025 * radial_dirs * leg_mask[:, None]
    # seeded smooth fields: per-bone amplitude modulated along the bone
    axial = np.array([np.dot(verts[i], offsets[bone_of_vertex[i]])
                      / max(np.dot(offsets[bone_of_vertex[i]],
                                   offsets[bone_of_vertex[i]]), 1e-12)
                      for i in range(V)])
    for b in range(5, 10):
        amp = rng.normal(0.0, 0.012, size=J)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(2.0 * math.pi * axial + phase)
        basis[b] = (amp[bone_of_vertex] * wave)[:, None] * radial_dirs

    return KinematicRig(
        joint_names=names,
        parents=parents,
        rest_offsets=offsets,
        template_vertices=verts,
        skin_index=np.array(skin_idx, dtype=np.int64),
        skin_weight=np.array(skin_w, dtype=float),
        shape_basis=basis,
        joint_limits=limits,
        hand_subtrees=subtrees,
        keypoint_maps={k: list(v) for k, v in KEYPOINT_MAPS.items()},
    )


def sample_params(rig, prior=None, seed=0, root_target=(0.0, 0.0, 0.0),
                  pose_sigma=0.25, hand_sigma=0.15):
    """Draw plausible parameters: pose within joint limits, scales in
    [0.8, 1.2], shape in [-2, 2]."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    J = rig.n_joints
    if prior is not None:
        sub = prior.sample(1, rng)[0].reshape(J - 1, 3)
        pose = np.vstack([rng.normal(0.0, 0.3, size=(1, 3)), sub])
    else:
        sigma = np.full((J, 1), pose_sigma)
        sigma[24:] = hand_sigma
        pose = rng.normal(0.0, 1.0, size=(J, 3)) * sigma
    lo = rig.joint_limits[..., 0] * 0.9
    hi = rig.joint_limits[..., 1] * 0.9
    pose = np.clip(pose, lo, hi)
    scales = rng.uniform(0.8, 1.2, size=rig.n_bones)
    shape = rng.uniform(-2.0, 2.0, size=rig.n_shape)
    root = np.asarray(root_target, dtype=float) + rng.normal(0.0, 0.05, size=3)
    return RigParams(pose=pose, root_translation=root, scales=scales, shape=shape)


@dataclass
class GroundTruth:
    params: RigParams
    joints: np.ndarray          # (J,3)
    vertices: np.ndarray        # (V,3)
    joints2d: np.ndarray        # (C,J,2), exact projections
    joints2d_valid: np.ndarray  # (C,J) bool, in front of the camera


def default_vertex_sample(rig, count):
    if count <= 0:
        return np.zeros(0, dtype=int)
    return np.unique(np.linspace(0, rig.n_vertices - 1, count).astype(int))


def render_observations(rig, params, cameras, noise_sigma=0.0, outlier_rate=0.0,
                        occlusion_rate=0.0, seed=0, vertex_sample=0):
    """Exact projections plus Gaussian noise, uniform in-image outliers, and
    random invisibility flags. Behind-camera keypoints are flagged invisible.

    Returns (per-view observation lists, GroundTruth).
    """
    for rate in (outlier_rate, occlusion_rate):
        if not 0.0 <= rate <= 1.0:
            raise RigfitError("rates must be in [0, 1]")
    rng = np.random.Generator(np.random.Philox(key=seed))
    _, tg = forward_kinematics(rig, params)
    joints = np.asarray(tg)
    vertices = np.asarray(skin_vertices(rig, params))
    vsample = default_vertex_sample(rig, vertex_sample)
    pts = joints if not vsample.size else np.vstack([joints, vertices[vsample]])
    ids = list(range(rig.n_joints)) + [VERTEX_ID_BASE + int(v) for v in vsample]
    K = len(ids)

    obs_per_view = []
    joints2d = np.zeros((len(cameras), rig.n_joints, 2))
    joints2d_valid = np.zeros((len(cameras), rig.n_joints), dtype=bool)
    for ci, cam in enumerate(cameras):
        Xc = cam.to_camera(pts)
        z = Xc[:, 2]
        front = z > MIN_DEPTH
        zsafe = np.where(front, z, 1.0)
        uv = np.stack([cam.fx * Xc[:, 0] / zsafe + cam.cx,
                       cam.fy * Xc[:, 1] / zsafe + cam.cy], axis=1)
        joints2d[ci] = uv[:rig.n_joints]
        joints2d_valid[ci] = front[:rig.n_joints]
        occluded = rng.random(K) < occlusion_rate
        outlier = rng.random(K) < outlier_rate
        noise = rng.normal(0.0, 1.0, size=(K, 2)) * noise_sigma
        uniform = rng.random((K, 2)) * np.array([cam.width, cam.height])
        obs = []
        for k in range(K):
            if outlier[k]:
                u, v = uniform[k]
            else:
                u, v = uv[k] + noise[k]
            obs.append(Observation2D(
                id=ids[k], u=float(u), v=float(v), conf=1.0,
                visible=bool(front[k] and not occluded[k]), prompt=False))
        obs_per_view.append(obs)
    gt = GroundTruth(params=params, joints=joints, vertices=vertices,
                     joints2d=joints2d, joints2d_valid=joints2d_valid)
    return obs_per_view, gt


@dataclass
class SceneBundle:
    rig: KinematicRig
    cameras: list
    frame_rate: float
    frames: list = field(default_factory=list)   # frames[t][c] -> [Observation2D]
    gt: list = field(default_factory=list)       # per-frame GroundTruth
    image_size: tuple = (512, 512)


def make_scene(seed, n_cameras=4, n_frames=1, noise_sigma=0.0, outlier_rate=0.0,
               occlusion_rate=0.0, radius=3.2, hfov_deg=60.0, image_size=512,
               vertex_sample=64, frame_rate=30.0, motion_sigma=0.03):
    """Ground-truth scene: one subject moving linearly, a camera ring, and
    per-frame observations."""
    if n_cameras < 1:
        raise RigfitError("need at least one camera")
    if n_frames < 1:
        raise RigfitError("need at least one frame")
    rig = make_default_rig(seed=0)
    seq = np.random.SeedSequence(seed)
    s_params, s_motion, s_obs = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
    params0 = sample_params(rig, seed=s_params)
    mrng = np.random.Generator(np.random.Philox(key=s_motion))
    dpose = mrng.normal(0.0, motion_sigma, size=params0.pose.shape)
    droot = mrng.normal(0.0, 0.01, size=3)
    cameras = camera_ring(n_cameras, radius, target=(0.0, 0.0, 0.0),
                          hfov_deg=hfov_deg, width=image_size, height=image_size)
    lo = rig.joint_limits[..., 0] * 0.95
    hi = rig.joint_limits[..., 1] * 0.95
    frames, gts = [], []
    for t in range(n_frames):
        params_t = RigParams(
            pose=np.clip(params0.pose + t * dpose, lo, hi),
            root_translation=params0.root_translation + t * droot,
            scales=params0.scales.copy(),
            shape=params0.shape.copy(),
        )
        obs, gt = render_observations(
            rig, params_t, cameras, noise_sigma=noise_sigma,
            outlier_rate=outlier_rate, occlusion_rate=occlusion_rate,
            seed=s_obs + t, vertex_sample=vertex_sample)
        frames.append(obs)
        gts.append(gt)
    return SceneBundle(rig=rig, cameras=cameras, frame_rate=frame_rate,
                       frames=frames, gt=gts,
                       image_size=(image_size, image_size))
