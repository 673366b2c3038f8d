"""Kinematic rig: joint tree, forward kinematics, and surface skinning.

The rig decouples skeletal structure from surface shape: bone lengths come
from per-bone scale factors applied to rest offsets, while shape coefficients
only displace surface vertices (in bone-local frames) and can never move a
joint. Template vertices are stored in the local frame of the bone's parent
joint; skinning applies each weighted joint's global transform directly to
the stored coordinates.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, RigfitError
from .optim import dual as dm
from .optim.dual import Dual


@dataclass(frozen=True)
class HandSubtree:
    """A connected set of finger joints hanging off a wrist joint."""

    side: str
    wrist: int
    joints: tuple


@dataclass(frozen=True)
class KinematicRig:
    joint_names: tuple
    parents: np.ndarray          # (J,) int, parents[0] == -1
    rest_offsets: np.ndarray     # (J,3) parent-frame bone vectors, meters
    template_vertices: np.ndarray  # (V,3) bone-local coordinates, meters
    skin_index: np.ndarray       # (V,W) joint indices
    skin_weight: np.ndarray      # (V,W) nonnegative, rows sum to 1
    shape_basis: np.ndarray      # (B,V,3) bone-local offset fields, meters
    joint_limits: np.ndarray     # (J,3,2) [lo,hi] radians
    hand_subtrees: tuple         # (left: HandSubtree, right: HandSubtree)
    keypoint_maps: dict = field(default_factory=dict)

    def __post_init__(self):
        J = len(self.joint_names)
        if self.parents.shape != (J,) or self.rest_offsets.shape != (J, 3):
            raise DimensionMismatchError("joint arrays disagree with joint count")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise RigfitError("exactly one root joint (index 0) is required")
        if np.any(self.parents[1:] >= np.arange(1, J)):
            raise RigfitError("joints must be topologically ordered (parent < child)")
        if self.joint_limits.shape != (J, 3, 2):
            raise DimensionMismatchError("joint_limits must be (J,3,2)")
        w = self.skin_weight
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-9:
            raise RigfitError("skinning weights must be nonnegative and sum to 1")
        if self.shape_basis.shape[1:] != self.template_vertices.shape:
            raise DimensionMismatchError("shape basis disagrees with template")
        self._validate_subtrees()
        for arr in (self.parents, self.rest_offsets, self.template_vertices,
                    self.skin_index, self.skin_weight, self.shape_basis,
                    self.joint_limits):
            arr.setflags(write=False)

    def _validate_subtrees(self):
        left, right = self.hand_subtrees
        if set(left.joints) & set(right.joints):
            raise RigfitError("hand subtrees must be disjoint")
        for sub in (left, right):
            members = set(sub.joints)
            for j in sub.joints:
                p = int(self.parents[j])
                if p != sub.wrist and p not in members:
                    raise RigfitError(
                        f"subtree joint {j} does not connect to wrist {sub.wrist}"
                    )

    @property
    def n_joints(self):
        return len(self.joint_names)

    @property
    def n_bones(self):
        return self.n_joints - 1

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[0]

    def joint_index(self, name):
        return self.joint_names.index(name)

    def bone_rest_lengths(self):
        """Rest length of bone b = (joint b+1, its parent)."""
        return np.linalg.norm(self.rest_offsets[1:], axis=1)

    def subtree(self, side):
        for sub in self.hand_subtrees:
            if sub.side == side:
                return sub
        raise RigfitError(f"unknown hand side {side!r}")


@dataclass
class RigParams:
    """Pose (axis-angle per joint), root translation, bone scales, shape."""

    pose: np.ndarray              # (J,3) radians
    root_translation: np.ndarray  # (3,) meters
    scales: np.ndarray            # (J-1,) per-bone, bone b = joint b+1
    shape: np.ndarray             # (B,)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float)
        self.root_translation = np.asarray(self.root_translation, dtype=float)
        self.scales = np.asarray(self.scales, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float)

    @classmethod
    def rest(cls, rig):
        return cls(
            pose=np.zeros((rig.n_joints, 3)),
            root_translation=np.zeros(3),
            scales=np.ones(rig.n_bones),
            shape=np.zeros(rig.n_shape),
        )

    def copy(self):
        return RigParams(self.pose.copy(), self.root_translation.copy(),
                         self.scales.copy(), self.shape.copy())

    def validate(self, rig):
        if self.pose.shape != (rig.n_joints, 3):
            raise DimensionMismatchError(
                f"pose shape {self.pose.shape} != ({rig.n_joints}, 3)")
        if self.root_translation.shape != (3,):
            raise DimensionMismatchError("root_translation must be a 3-vector")
        if self.scales.shape != (rig.n_bones,):
            raise DimensionMismatchError(
                f"scales length {self.scales.shape} != {rig.n_bones}")
        if self.shape.shape != (rig.n_shape,):
            raise DimensionMismatchError(
                f"shape length {self.shape.shape} != {rig.n_shape}")
        if not np.all(np.isfinite(self.pose)):
            raise RigfitError("pose contains non-finite values")
        if np.any(self.scales <= 0):
            raise RigfitError("skeleton scales must be positive")


def _as_dual_parts(x, ndirs):
    if isinstance(x, Dual):
        return x.val, x.eps
    x = np.asarray(x, dtype=float)
    return x, np.zeros(x.shape + (ndirs,))


def fk_transforms(rig, pose, root_translation, scales):
    """Global joint rotations and positions; inputs may be Dual.

    Returns (Rg, tg); both are Dual when any input is.
    """
    duals = [x for x in (pose, root_translation, scales) if isinstance(x, Dual)]
    rest = rig.rest_offsets
    if not duals:
        R_local = kernels.rodrigues(np.asarray(pose, dtype=float))
        s = np.concatenate([[1.0], np.asarray(scales, dtype=float)])
        offsets = rest * s[:, None]
        return kernels.fk_chain(rig.parents, offsets, R_local,
                                np.asarray(root_translation, dtype=float))
    n = duals[0].ndirs
    pose_v, pose_e = _as_dual_parts(pose, n)
    rt_v, rt_e = _as_dual_parts(root_translation, n)
    sc_v, sc_e = _as_dual_parts(scales, n)
    R_local, Rl_eps = kernels.rodrigues_dual(pose_v, pose_e)
    s = np.concatenate([[1.0], sc_v])
    s_eps = np.concatenate([np.zeros((1, n)), sc_e], axis=0)
    offsets = rest * s[:, None]
    off_eps = rest[:, :, None] * s_eps[:, None, :]
    Rg, Rg_eps, tg, tg_eps = kernels.fk_chain_dual(
        rig.parents, offsets, off_eps, R_local, Rl_eps, rt_v, rt_e)
    return Dual(Rg, Rg_eps), Dual(tg, tg_eps)


def forward_kinematics(rig, params):
    """Per-joint global rigid transforms and 3D joint positions (meters)."""
    params.validate(rig)
    return fk_transforms(rig, params.pose, params.root_translation, params.scales)


def joint_positions(rig, params):
    _, tg = forward_kinematics(rig, params)
    return tg


def blended_template(rig, shape, vertex_ids=None):
    """Template vertices plus shape-basis offsets (bone-local coordinates)."""
    basis = rig.shape_basis
    template = rig.template_vertices
    if vertex_ids is not None:
        basis = basis[:, vertex_ids]
        template = template[vertex_ids]
    if isinstance(shape, Dual):
        val = template + np.einsum("bvi,b->vi", basis, shape.val)
        eps = np.einsum("bvi,bn->vin", basis, shape.eps)
        return Dual(val, eps)
    return template + np.einsum("bvi,b->vi", basis, np.asarray(shape, dtype=float))


def skin_vertices_from(rig, Rg, tg, shape, vertex_ids=None):
    """Linear blend skinning given FK output (all inputs may be Dual)."""
    widx = rig.skin_index
    wval = rig.skin_weight
    if vertex_ids is not None:
        widx = widx[vertex_ids]
        wval = wval[vertex_ids]
    vloc = blended_template(rig, shape, vertex_ids)
    duals = [x for x in (Rg, tg, vloc) if isinstance(x, Dual)]
    if not duals:
        return kernels.lbs(widx, wval, Rg, tg, vloc)
    n = duals[0].ndirs
    Rg_v, Rg_e = _as_dual_parts(Rg, n)
    tg_v, tg_e = _as_dual_parts(tg, n)
    vl_v, vl_e = _as_dual_parts(vloc, n)
    v, v_eps = kernels.lbs_dual(widx, wval, Rg_v, Rg_e, tg_v, tg_e, vl_v, vl_e)
    return Dual(v, v_eps)


def skin_vertices(rig, params, vertex_ids=None):
    """Posed surface vertices (meters)."""
    params.validate(rig)
    Rg, tg = fk_transforms(rig, params.pose, params.root_translation, params.scales)
    return skin_vertices_from(rig, Rg, tg, params.shape, vertex_ids)


def _resolve_subtree(rig, subtree):
    if isinstance(subtree, str):
        return rig.subtree(subtree)
    if isinstance(subtree, HandSubtree):
        for sub in rig.hand_subtrees:
            if tuple(sub.joints) == tuple(subtree.joints):
                return sub
        raise RigfitError("index set is not a registered hand subtree")
    raise RigfitError(f"cannot interpret subtree spec {subtree!r}")


def extract_subtree_params(params, subtree, rig):
    """Hand-local pose block as an (n_sub, 3) axis-angle array."""
    sub = _resolve_subtree(rig, subtree)
    return params.pose[list(sub.joints)].copy()


def write_subtree_params(params, subtree, values, rig):
    """Inverse of extract: returns params with only the subtree rows replaced."""
    sub = _resolve_subtree(rig, subtree)
    values = np.asarray(values, dtype=float)
    if values.shape != (len(sub.joints), 3):
        raise DimensionMismatchError(
            f"subtree pose must be ({len(sub.joints)}, 3), got {values.shape}")
    out = params.copy()
    out.pose[list(sub.joints)] = values
    return out


def bone_lengths(rig, joints3d):
    """Per-bone lengths from joint positions (bone b = joint b+1)."""
    j = np.asarray(joints3d)
    return np.linalg.norm(j[1:] - j[rig.parents[1:]], axis=1)


__all__ = [
    "HandSubtree", "KinematicRig", "RigParams", "forward_kinematics",
    "fk_transforms", "joint_positions", "skin_vertices", "skin_vertices_from",
    "blended_template", "extract_subtree_params", "write_subtree_params",
    "bone_lengths",
]
