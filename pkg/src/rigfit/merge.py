"""Full-body composition: install a hand-subtree solution into a body
solution and repair adjacent-joint error with wrist/elbow prompting.

Naive subtree replacement preserves finger articulation but can leave the
wrist reprojection wherever the body solution put it; the prompted
refinement pulls the wrist toward the hand solution's wrist pixel while the
body's own projected elbow anchors the arm, with the finger pose blocks
frozen throughout.
"""

import dataclasses

import numpy as np

from .camera import project
from .errors import RigfitError
from .fit_single import FitConfig, prompted_refine
from .rig import forward_kinematics, write_subtree_params


def merge_hand_into_body(body_params, hand_local_pose, handedness, rig):
    """Body parameters with the chosen hand subtree's rotations replaced."""
    if handedness not in ("left", "right"):
        raise RigfitError(f"handedness must be 'left' or 'right', got {handedness!r}")
    return write_subtree_params(body_params, handedness, hand_local_pose, rig)


def hand_gate(hand_confidence, threshold=0.5):
    """Accept the hand solution iff its confidence reaches the threshold."""
    return hand_confidence >= threshold


def _hand_block(handedness):
    return "pose_lhand" if handedness == "left" else "pose_rhand"


def prompted_wrist_elbow_refine(rig, merged_params, camera, wrist_target_px,
                                elbow_px, handedness, config=None, prior=None):
    """Two-prompt refinement: wrist at the hand solution's pixel, elbow at
    the body solution's own projection; finger blocks are frozen."""
    if handedness not in ("left", "right"):
        raise RigfitError(f"handedness must be 'left' or 'right', got {handedness!r}")
    config = config or FitConfig()
    wrist = rig.joint_index(f"{handedness[0]}_wrist")
    elbow = rig.joint_index(f"{handedness[0]}_elbow")
    cfg = dataclasses.replace(
        config,
        freeze_blocks=tuple(set(config.freeze_blocks)
                            | {"pose_lhand", "pose_rhand"}),
    )
    prompts = [(wrist, tuple(wrist_target_px)), (elbow, tuple(elbow_px))]
    return prompted_refine(rig, merged_params, camera, prompts,
                           config=cfg, prior=prior)


def merge_and_refine(rig, body_params, hand_solutions, camera, config=None,
                     prior=None, gate_threshold=0.5, simultaneous=True):
    """Full pipeline over one or two hands.

    hand_solutions: {handedness: {"pose": (n,3) local pose,
    "wrist_px": (u, v), "confidence": float}}. Hands failing the gate are
    skipped. With simultaneous=True all wrist/elbow prompts go into a single
    refinement; otherwise hands are refined one after the other.
    """
    merged = body_params.copy()
    accepted = []
    for side, sol in hand_solutions.items():
        if not hand_gate(sol.get("confidence", 1.0), gate_threshold):
            continue
        merged = merge_hand_into_body(merged, sol["pose"], side, rig)
        accepted.append(side)
    if not accepted:
        return merged, None
    config = config or FitConfig()
    cfg = dataclasses.replace(
        config,
        freeze_blocks=tuple(set(config.freeze_blocks)
                            | {"pose_lhand", "pose_rhand"}),
    )

    def elbow_px_of(params, side):
        _, tg = forward_kinematics(rig, params)
        return project(camera, np.asarray(tg)[rig.joint_index(f"{side[0]}_elbow")])

    result = None
    if simultaneous:
        prompts = []
        for side in accepted:
            wrist = rig.joint_index(f"{side[0]}_wrist")
            prompts.append((wrist, tuple(hand_solutions[side]["wrist_px"])))
            prompts.append((rig.joint_index(f"{side[0]}_elbow"),
                            tuple(elbow_px_of(merged, side))))
        result = prompted_refine(rig, merged, camera, prompts,
                                 config=cfg, prior=prior)
        merged = result.params
    else:
        for side in accepted:
            result = prompted_wrist_elbow_refine(
                rig, merged, camera, hand_solutions[side]["wrist_px"],
                elbow_px_of(merged, side), side, config=config, prior=prior)
            merged = result.params
    return merged, result
