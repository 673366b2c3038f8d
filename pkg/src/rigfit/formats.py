"""Versioned JSON file schemas and loaders.

All artifacts are UTF-8 JSON without NaN/Inf; angles are radians and lengths
meters. Every document carries a "schema" field like "rigfit/rig/v1";
loaders reject unknown major versions and report the offending field.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .camera import Camera
from .errors import SchemaError
from .fit_single import Observation2D
from .priors import GmmPrior
from .rig import HandSubtree, KinematicRig, RigParams
from .synth import GroundTruth, SceneBundle

SCHEMAS = {
    "rig": "rigfit/rig/v1",
    "camera": "rigfit/camera/v1",
    "cameras": "rigfit/cameras/v1",
    "obs2d": "rigfit/obs2d/v1",
    "gmm": "rigfit/gmm/v1",
    "params": "rigfit/params/v1",
    "gt": "rigfit/gt/v1",
    "fit-report": "rigfit/fit-report/v1",
    "fit-report-multi": "rigfit/fit-report-multi/v1",
    "eval-report": "rigfit/eval-report/v1",
    "categories": "rigfit/categories/v1",
}


def dump_json(doc, path=None):
    """Serialize deterministically (sorted keys, no NaN). Returns the text;
    writes it when a path is given."""
    text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON in {path}: line {e.lineno} col {e.colno}")
    except OSError as e:
        raise SchemaError(f"cannot read {path}: {e}")


def check_schema(doc, kind, where=""):
    expected = SCHEMAS[kind]
    got = doc.get("schema")
    if got is None:
        raise SchemaError("missing 'schema' field", field=where or kind)
    if got != expected:
        base, _, major = str(got).rpartition("/")
        if base == expected.rpartition("/")[0]:
            raise SchemaError(f"unsupported schema version {got!r} "
                              f"(expected {expected!r})", field=where or kind)
        raise SchemaError(f"wrong document type {got!r} (expected {expected!r})",
                          field=where or kind)


def _need(doc, key, where):
    if key not in doc:
        raise SchemaError("missing required field", field=f"{where}.{key}")
    return doc[key]


def config_hash(config_doc):
    """Stable digest of a config document, recorded in reports."""
    text = json.dumps(config_doc, sort_keys=True, allow_nan=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# -- rig ---------------------------------------------------------------------

def rig_to_doc(rig):
    return {
        "schema": SCHEMAS["rig"],
        "joints": [
            {"name": n, "parent": (None if rig.parents[i] < 0 else int(rig.parents[i])),
             "rest_offset": [float(v) for v in rig.rest_offsets[i]]}
            for i, n in enumerate(rig.joint_names)
        ],
        "template_vertices": rig.template_vertices.tolist(),
        "skinning": [
            [[int(j), float(w)] for j, w in zip(ji, wi) if w > 0]
            for ji, wi in zip(rig.skin_index, rig.skin_weight)
        ],
        "shape_basis": rig.shape_basis.tolist(),
        "joint_limits": rig.joint_limits.tolist(),
        "hand_subtrees": {
            s.side: {"wrist": int(s.wrist), "joints": [int(j) for j in s.joints]}
            for s in rig.hand_subtrees
        },
        "keypoint_maps": {k: [int(i) for i in v] for k, v in rig.keypoint_maps.items()},
    }


def rig_from_doc(doc, where="rig"):
    check_schema(doc, "rig", where)
    joints = _need(doc, "joints", where)
    names = tuple(j["name"] for j in joints)
    parents = np.array([-1 if j["parent"] is None else int(j["parent"])
                        for j in joints], dtype=np.int64)
    offsets = np.array([j["rest_offset"] for j in joints], dtype=float)
    skinning = _need(doc, "skinning", where)
    wmax = max(len(s) for s in skinning)
    skin_idx = np.zeros((len(skinning), wmax), dtype=np.int64)
    skin_w = np.zeros((len(skinning), wmax))
    for v, entries in enumerate(skinning):
        for s, (j, w) in enumerate(entries):
            skin_idx[v, s] = int(j)
            skin_w[v, s] = float(w)
    subs = _need(doc, "hand_subtrees", where)
    subtrees = tuple(
        HandSubtree(side=side, wrist=int(subs[side]["wrist"]),
                    joints=tuple(int(j) for j in subs[side]["joints"]))
        for side in ("left", "right")
    )
    return KinematicRig(
        joint_names=names,
        parents=parents,
        rest_offsets=offsets,
        template_vertices=np.array(_need(doc, "template_vertices", where), dtype=float),
        skin_index=skin_idx,
        skin_weight=skin_w,
        shape_basis=np.array(_need(doc, "shape_basis", where), dtype=float),
        joint_limits=np.array(_need(doc, "joint_limits", where), dtype=float),
        hand_subtrees=subtrees,
        keypoint_maps={k: [int(i) for i in v]
                       for k, v in doc.get("keypoint_maps", {}).items()},
    )


# -- camera --------------------------------------------------------------

def camera_to_doc(cam):
    return {
        "schema": SCHEMAS["camera"],
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": [float(v) for v in np.asarray(cam.rotation).ravel()],
        "translation": [float(v) for v in cam.translation],
    }


def camera_from_doc(doc, where="camera"):
    check_schema(doc, "camera", where)
    rot = np.array(_need(doc, "rotation", where), dtype=float)
    if rot.size != 9:
        raise SchemaError("rotation must have 9 numbers (row-major)",
                          field=f"{where}.rotation")
    return Camera(
        fx=float(_need(doc, "fx", where)), fy=float(_need(doc, "fy", where)),
        cx=float(_need(doc, "cx", where)), cy=float(_need(doc, "cy", where)),
        width=int(_need(doc, "width", where)), height=int(_need(doc, "height", where)),
        rotation=rot.reshape(3, 3),
        translation=np.array(_need(doc, "translation", where), dtype=float),
    )


def cameras_to_doc(cams, frame_rate=30.0):
    return {
        "schema": SCHEMAS["cameras"],
        "frame_rate": frame_rate,
        "cameras": [camera_to_doc(c) for c in cams],
    }


def cameras_from_doc(doc, where="cameras"):
    check_schema(doc, "cameras", where)
    cams = [camera_from_doc(c, where=f"{where}.cameras[{i}]")
            for i, c in enumerate(_need(doc, "cameras", where))]
    return cams, float(doc.get("frame_rate", 30.0))


# -- observations ---------------------------------------------------------

def observations_to_doc(observations, width, height):
    return {
        "schema": SCHEMAS["obs2d"],
        "image": {"width": width, "height": height},
        "keypoints": [
            {"id": int(o.id), "u": float(o.u), "v": float(o.v),
             "conf": float(o.conf), "visible": bool(o.visible),
             "prompt": bool(o.prompt)}
            for o in observations
        ],
    }


def observations_from_doc(doc, where="obs2d"):
    check_schema(doc, "obs2d", where)
    img = _need(doc, "image", where)
    obs = [
        Observation2D(id=int(k["id"]), u=float(k["u"]), v=float(k["v"]),
                      conf=float(k.get("conf", 1.0)),
                      visible=bool(k.get("visible", True)),
                      prompt=bool(k.get("prompt", False)))
        for k in _need(doc, "keypoints", where)
    ]
    return obs, (int(img["width"]), int(img["height"]))


# -- params / prior ---------------------------------------------------------

def params_to_doc(params):
    return {
        "schema": SCHEMAS["params"],
        "pose": params.pose.tolist(),
        "root_translation": params.root_translation.tolist(),
        "scales": params.scales.tolist(),
        "shape": params.shape.tolist(),
    }


def params_from_doc(doc, where="params"):
    check_schema(doc, "params", where)
    return RigParams(
        pose=np.array(_need(doc, "pose", where), dtype=float),
        root_translation=np.array(_need(doc, "root_translation", where), dtype=float),
        scales=np.array(_need(doc, "scales", where), dtype=float),
        shape=np.array(_need(doc, "shape", where), dtype=float),
    )


def gmm_to_doc(prior):
    return {
        "schema": SCHEMAS["gmm"],
        "K": int(prior.k),
        "dim": int(prior.dim),
        "weights": prior.weights.tolist(),
        "means": prior.means.tolist(),
        "covariances": prior.covariances.tolist(),
    }


def gmm_from_doc(doc, where="gmm"):
    check_schema(doc, "gmm", where)
    prior = GmmPrior(
        weights=np.array(_need(doc, "weights", where), dtype=float),
        means=np.array(_need(doc, "means", where), dtype=float),
        covariances=np.array(_need(doc, "covariances", where), dtype=float),
    )
    if prior.k != int(doc.get("K", prior.k)) or prior.dim != int(doc.get("dim", prior.dim)):
        raise SchemaError("K/dim fields disagree with array shapes", field=where)
    return prior


# -- ground truth / scene bundle ---------------------------------------------

def gt_to_doc(gts):
    return {
        "schema": SCHEMAS["gt"],
        "frames": [
            {
                "params": params_to_doc(g.params),
                "joints": g.joints.tolist(),
                "vertices": g.vertices.tolist(),
                "joints2d": g.joints2d.tolist(),
                "joints2d_valid": g.joints2d_valid.tolist(),
            }
            for g in gts
        ],
    }


def gt_from_doc(doc, where="gt"):
    check_schema(doc, "gt", where)
    gts = []
    for i, f in enumerate(_need(doc, "frames", where)):
        gts.append(GroundTruth(
            params=params_from_doc(f["params"], where=f"{where}.frames[{i}].params"),
            joints=np.array(f["joints"], dtype=float),
            vertices=np.array(f["vertices"], dtype=float),
            joints2d=np.array(f["joints2d"], dtype=float),
            joints2d_valid=np.array(f["joints2d_valid"], dtype=bool),
        ))
    return gts


def frame_obs_name(t, c):
    return f"frame{t:03d}_cam{c:02d}.obs2d.json"


def save_scene_bundle(bundle, out_dir):
    """Write rig.json, cameras.json, frames/*.obs2d.json, gt.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    dump_json(rig_to_doc(bundle.rig), out / "rig.json")
    dump_json(cameras_to_doc(bundle.cameras, bundle.frame_rate), out / "cameras.json")
    w, h = bundle.image_size
    for t, views in enumerate(bundle.frames):
        for c, obs in enumerate(views):
            dump_json(observations_to_doc(obs, w, h),
                      out / "frames" / frame_obs_name(t, c))
    dump_json(gt_to_doc(bundle.gt), out / "gt.json")
    return out


def load_scene_bundle(scene_dir, with_gt=True):
    scene = Path(scene_dir)
    rig = rig_from_doc(load_json(scene / "rig.json"), where="rig.json")
    cams, frame_rate = cameras_from_doc(load_json(scene / "cameras.json"),
                                        where="cameras.json")
    frame_files = sorted((scene / "frames").glob("*.obs2d.json"))
    if not frame_files:
        raise SchemaError("no frames/*.obs2d.json files found", field=str(scene))
    per_frame = {}
    size = None
    for f in frame_files:
        name = f.name.replace(".obs2d.json", "")
        try:
            t = int(name.split("_")[0].replace("frame", ""))
            c = int(name.split("_")[1].replace("cam", ""))
        except (IndexError, ValueError):
            raise SchemaError(f"cannot parse frame/camera from {f.name}",
                              field=f.name)
        obs, size = observations_from_doc(load_json(f), where=f.name)
        per_frame.setdefault(t, {})[c] = obs
    frames = []
    for t in sorted(per_frame):
        views = [per_frame[t].get(c, []) for c in range(len(cams))]
        frames.append(views)
    gts = []
    if with_gt and (scene / "gt.json").exists():
        gts = gt_from_doc(load_json(scene / "gt.json"), where="gt.json")
    return SceneBundle(rig=rig, cameras=cams, frame_rate=frame_rate,
                       frames=frames, gt=gts, image_size=size or (512, 512))


# -- reports ------------------------------------------------------------------

def fit_report_doc(result, config_doc):
    return {
        "schema": SCHEMAS["fit-report"],
        "tool_version": __version__,
        "config_hash": config_hash(config_doc),
        "config": config_doc,
        "params": params_to_doc(result.params),
        "per_term": {k: float(v) for k, v in result.per_term.items()},
        "counts": {k: int(v) for k, v in result.counts.items()},
        "total_cost": float(result.total_cost),
        "cost_trace": [float(c) for c in result.cost_trace],
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "warnings": list(result.warnings),
    }


def multi_fit_report_doc(result, config_doc):
    return {
        "schema": SCHEMAS["fit-report-multi"],
        "tool_version": __version__,
        "config_hash": config_hash(config_doc),
        "config": config_doc,
        "shared": {
            "scales": result.scales.tolist(),
            "shape": result.shape.tolist(),
        },
        "cameras": [camera_to_doc(c) for c in result.cameras],
        "frames": [
            {
                "params": params_to_doc(f.params),
                "per_term": {k: float(v) for k, v in f.per_term.items()},
                "total_cost": float(f.total_cost),
            }
            for f in result.frames
        ],
        "total_cost": float(result.total_cost),
        "round_costs": [float(c) for c in result.round_costs],
        "converged": bool(result.converged),
        "warnings": list(result.warnings),
    }
