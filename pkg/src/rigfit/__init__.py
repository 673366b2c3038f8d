"""rigfit: kinematic-rig mesh fitting toolkit.

Decoupled skeleton/shape rig with forward kinematics and skinning,
single-view and multi-view keypoint fitting, pose priors, evaluation
metrics, deterministic synthetic scenes, a CLI, and an annotation service.
"""

__version__ = "0.1.0"
