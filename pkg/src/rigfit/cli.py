"""Command-line surface: synth, fit-single, fit-multi, eval, serve.

Reports go to --out (or stdout with `--out -`); logs go to stderr. Exit
codes: 0 success, 2 configuration/schema errors, 3 numeric failures (a
report stub is still written).
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, formats
from .camera import project_depths
from .errors import RigfitError, SchemaError
from .fit_single import FitConfig, fit_single_view
from .fit_multi import MultiFitConfig, MultiViewSequence, RansacConfig, fit_multi_view
from .metrics import (MM, PCK_THRESHOLDS, avg_pck, fscore, keypoint_bbox,
                      mpjpe, pa_mpjpe, pck, pve)
from .optim.solvers import FirstOrderConfig, LMConfig
from .priors import make_default_prior
from .rig import forward_kinematics, skin_vertices
from .synth import make_scene

log = logging.getLogger("rigfit")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _write_report(doc, out):
    if out == "-":
        sys.stdout.write(formats.dump_json(doc))
    else:
        formats.dump_json(doc, out)


def _nested_config(cls, data):
    """Build a (possibly nested) dataclass config from a plain dict."""
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise SchemaError(f"unknown config field {key!r}", field=key)
        ftype = fields[key].type
        if isinstance(value, dict) and dataclasses.is_dataclass(ftype):
            kwargs[key] = _nested_config(ftype, value)
        elif key == "huber_stages":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _load_config(path, cls):
    if path is None:
        return cls(), {}
    doc = formats.load_json(path)
    doc.pop("schema", None)
    init = doc.pop("init", None)
    cfg = _nested_config(cls, doc)
    extras = {"init": init} if init is not None else {}
    return cfg, extras


def _config_doc(cfg):
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=list))


def cmd_synth(args):
    if args.cameras < 1:
        raise SchemaError("--cameras must be >= 1", field="--cameras")
    if args.frames < 1:
        raise SchemaError("--frames must be >= 1", field="--frames")
    for name in ("outliers", "occlusion"):
        if not 0.0 <= getattr(args, name) <= 1.0:
            raise SchemaError(f"--{name} must be in [0, 1]", field=f"--{name}")
    if args.noise < 0:
        raise SchemaError("--noise must be >= 0", field="--noise")
    bundle = make_scene(
        seed=args.seed, n_cameras=args.cameras, n_frames=args.frames,
        noise_sigma=args.noise, outlier_rate=args.outliers,
        occlusion_rate=args.occlusion, image_size=args.size,
        vertex_sample=args.dense_verts, radius=args.radius,
        hfov_deg=args.hfov)
    formats.save_scene_bundle(bundle, args.out)
    log.info("wrote scene bundle to %s", args.out)
    return 0


def cmd_fit_single(args):
    rig = formats.rig_from_doc(formats.load_json(args.rig), where=args.rig)
    obs, _ = formats.observations_from_doc(formats.load_json(args.obs), where=args.obs)
    camera = formats.camera_from_doc(formats.load_json(args.camera), where=args.camera)
    config, _ = _load_config(args.config, FitConfig)
    if args.init is not None:
        init = formats.params_from_doc(formats.load_json(args.init), where=args.init)
    else:
        from .rig import RigParams
        init = RigParams.rest(rig)
        # rest pose 3 m down the camera's optical axis
        init.root_translation = camera.rotation.T @ (
            np.array([0.0, 0.0, 3.0]) - camera.translation)
    prior = None
    if args.prior is not None:
        prior = formats.gmm_from_doc(formats.load_json(args.prior), where=args.prior)
    result = fit_single_view(rig, init, camera, obs, prior=prior, config=config)
    _write_report(formats.fit_report_doc(result, _config_doc(config)), args.out)
    return 0


def cmd_fit_multi(args):
    bundle = formats.load_scene_bundle(args.scene, with_gt=False)
    config, extras = _load_config(args.config, MultiFitConfig)
    if extras.get("init"):
        config.init = [formats.params_from_doc(p) for p in extras["init"]]
    seq = MultiViewSequence(cameras=bundle.cameras, frames=bundle.frames,
                            frame_rate=bundle.frame_rate)
    prior = None
    if args.prior is not None:
        prior = formats.gmm_from_doc(formats.load_json(args.prior), where=args.prior)
    result = fit_multi_view(bundle.rig, seq, prior=prior, config=config)
    cfg_doc = _config_doc(config)
    cfg_doc.pop("init", None)
    _write_report(formats.multi_fit_report_doc(result, cfg_doc), args.out)
    return 0


ALL_METRICS = ("mpjpe", "pa_mpjpe", "pve", "pck", "avg_pck", "fscore")


def _pred_frames_from_report(doc, where):
    if doc.get("schema") == formats.SCHEMAS["fit-report"]:
        return [formats.params_from_doc(doc["params"], where=where)]
    if doc.get("schema") == formats.SCHEMAS["fit-report-multi"]:
        return [formats.params_from_doc(f["params"], where=where)
                for f in doc["frames"]]
    if doc.get("schema") == formats.SCHEMAS["params"]:
        return [formats.params_from_doc(doc, where=where)]
    raise SchemaError("not a fit report or params document", field=where)


def evaluate_predictions(rig, cameras, pred_params, gts, metrics=ALL_METRICS,
                         categories=None):
    """Per-frame and aggregate metrics for predicted parameters vs GT."""
    body24 = rig.keypoint_maps.get("body24", list(range(min(24, rig.n_joints))))
    body17 = rig.keypoint_maps.get("body17", body24)
    feet6 = rig.keypoint_maps.get("feet6", [])
    per_sample = []
    for t, (params, gt) in enumerate(zip(pred_params, gts)):
        tg = np.asarray(forward_kinematics(rig, params)[1])
        entry = {"id": f"frame{t:03d}"}
        if "mpjpe" in metrics:
            entry["mpjpe"] = mpjpe(tg[body24], gt.joints[body24], align="root")
        if "pa_mpjpe" in metrics:
            entry["pa_mpjpe"] = pa_mpjpe(tg[body24], gt.joints[body24])
        if "pve" in metrics:
            verts = np.asarray(skin_vertices(rig, params))
            entry["pve"] = pve(verts, gt.vertices, pred_root=tg[0],
                               gt_root=gt.joints[0])
        if "fscore" in metrics:
            verts = np.asarray(skin_vertices(rig, params))
            entry["fscore@5mm"] = fscore(verts, gt.vertices, 5.0)
            entry["fscore@15mm"] = fscore(verts, gt.vertices, 15.0)
        if "pck" in metrics or "avg_pck" in metrics:
            pcks = {a: [] for a in PCK_THRESHOLDS}
            apcks, apcks_body, apcks_feet = [], [], []
            for c, cam in enumerate(cameras):
                depths = project_depths(cam, tg)
                valid = depths > 0
                uv = np.zeros((rig.n_joints, 2))
                zsafe = np.where(valid, depths, 1.0)
                Xc = cam.to_camera(tg)
                uv[:, 0] = cam.fx * Xc[:, 0] / zsafe + cam.cx
                uv[:, 1] = cam.fy * Xc[:, 1] / zsafe + cam.cy
                gt2d = gt.joints2d[c]
                vis = gt.joints2d_valid[c] & valid
                bbox = keypoint_bbox(gt2d, vis)
                if bbox is None:
                    continue
                for a in PCK_THRESHOLDS:
                    v = pck(uv, gt2d, bbox, a, visible=vis)
                    if v is not None:
                        pcks[a].append(v)
                ab = avg_pck(uv[body17], gt2d[body17], bbox, visible=vis[body17])
                if ab is not None:
                    apcks_body.append(ab)
                if feet6:
                    af = avg_pck(uv[feet6], gt2d[feet6], bbox, visible=vis[feet6])
                    if af is not None:
                        apcks_feet.append(af)
                aa = avg_pck(uv, gt2d, bbox, visible=vis)
                if aa is not None:
                    apcks.append(aa)
            if "pck" in metrics:
                for a in PCK_THRESHOLDS:
                    if pcks[a]:
                        entry[f"pck@{a:g}"] = float(np.mean(pcks[a]))
            if "avg_pck" in metrics:
                if apcks:
                    entry["avg_pck"] = float(np.mean(apcks))
                if apcks_body:
                    entry["avg_pck_body"] = float(np.mean(apcks_body))
                if apcks_feet:
                    entry["avg_pck_feet"] = float(np.mean(apcks_feet))
        per_sample.append(entry)

    def aggregate(entries):
        keys = sorted({k for e in entries for k in e if k != "id"})
        return {k: float(np.mean([e[k] for e in entries if k in e]))
                for k in keys if any(k in e for e in entries)}

    report = {"per_sample": per_sample, "aggregate": aggregate(per_sample)}
    if categories:
        by_label = {}
        for e in per_sample:
            for label in categories.get(e["id"], []):
                by_label.setdefault(label, []).append(e)
        report["categories"] = {
            label: dict(aggregate(entries), count=len(entries))
            for label, entries in sorted(by_label.items())
        }
    return report


def cmd_eval(args):
    pred_doc = formats.load_json(args.pred)
    gt_path = Path(args.gt)
    if gt_path.is_dir():
        bundle = formats.load_scene_bundle(gt_path)
        rig, cameras, gts = bundle.rig, bundle.cameras, bundle.gt
    else:
        raise SchemaError("--gt must be a scene bundle directory", field=args.gt)
    pred_params = _pred_frames_from_report(pred_doc, where=args.pred)
    if len(pred_params) != len(gts):
        raise SchemaError(
            f"prediction has {len(pred_params)} frames, GT has {len(gts)}",
            field=args.pred)
    metrics = tuple(args.metrics.split(",")) if args.metrics else ALL_METRICS
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise SchemaError(f"unknown metrics {sorted(unknown)}", field="--metrics")
    categories = None
    if args.categories:
        cat_doc = formats.load_json(args.categories)
        formats.check_schema(cat_doc, "categories", args.categories)
        categories = cat_doc["labels"]
    report = evaluate_predictions(rig, cameras, pred_params, gts,
                                  metrics=metrics, categories=categories)
    doc = {
        "schema": formats.SCHEMAS["eval-report"],
        "tool_version": __version__,
        "config_hash": formats.config_hash({"metrics": list(metrics)}),
        "metrics": list(metrics),
        **report,
    }
    _write_report(doc, args.out)
    return 0


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=args.data_dir, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_prior(args):
    rig = formats.rig_from_doc(formats.load_json(args.rig), where=args.rig)
    prior = make_default_prior(rig, seed=args.seed, k=args.components,
                               n_samples=args.samples)
    _write_report(formats.gmm_to_doc(prior), args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rigfit",
                                description="kinematic-rig fitting toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cameras", type=int, default=4)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma")
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--occlusion", type=float, default=0.0)
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--radius", type=float, default=3.2)
    s.add_argument("--hfov", type=float, default=60.0)
    s.add_argument("--dense-verts", type=int, default=64,
                   help="template-vertex keypoints per view")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("fit-single", help="fit one image's observations")
    s.add_argument("--rig", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--init")
    s.add_argument("--prior")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_single)

    s = sub.add_parser("fit-multi", help="fit a multi-view scene bundle")
    s.add_argument("--scene", required=True)
    s.add_argument("--prior")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_multi)

    s = sub.add_parser("eval", help="evaluate predictions against a scene's GT")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metrics", help="comma list: " + ",".join(ALL_METRICS))
    s.add_argument("--categories")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("prior", help="fit and write the default pose prior")
    s.add_argument("--rig", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--components", type=int, default=8)
    s.add_argument("--samples", type=int, default=600)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prior)

    s = sub.add_parser("serve", help="run the annotation/fitting service")
    s.add_argument("--port", type=int, default=8008)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--ui", help="directory of built UI assets to serve at /ui")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SchemaError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except RigfitError as e:
        log.error("numeric failure: %s", e)
        out = getattr(args, "out", None)
        if out and out != "-":
            formats.dump_json({"schema": "rigfit/error/v1", "error": str(e)}, out)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
