"""Annotation/fitting HTTP service.

Sessions hold an image reference, editable 2D keypoints, rig parameters, and
a fit history. Every mutation is journaled to the data directory as JSON so
annotation work survives restarts. Fits are mutually exclusive per session
(409 on overlap); different sessions fit concurrently.
"""

import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import __version__, formats
from .camera import camera_from_fov, project_depths
from .errors import RigfitError, SchemaError, UnderConstrainedError
from .fit_single import (FitConfig, Observation2D, VERTEX_ID_BASE,
                         fit_single_view, prompted_refine)
from .rig import RigParams, forward_kinematics, skin_vertices
from .synth import default_vertex_sample, make_default_rig


class KeypointIn(BaseModel):
    id: int
    u: float
    v: float
    conf: float = 1.0
    visible: bool = True
    prompt: bool = False


class SessionCreate(BaseModel):
    image_ref: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    rig_id: str = "default"
    camera: dict | None = None
    init_params: dict | None = None
    keypoints: list[KeypointIn] | None = None


class KeypointsPut(BaseModel):
    keypoints: list[KeypointIn]


class FitRequest(BaseModel):
    mode: str = "full"
    config: dict | None = None


def _err(status, message):
    return JSONResponse(status_code=status, content={"error": message})


class Session:
    def __init__(self, sid, image_ref, width, height, rig_id, camera, params,
                 keypoints):
        self.id = sid
        self.image_ref = image_ref
        self.width = width
        self.height = height
        self.rig_id = rig_id
        self.camera = camera
        self.params = params
        self.keypoints = keypoints            # {id: Observation2D}
        self.history = []                     # fit report docs, append-only
        self.dirty = False
        self.fit_lock = threading.Lock()
        self.mutate_lock = threading.Lock()

    def state_doc(self):
        return {
            "session_id": self.id,
            "image_ref": self.image_ref,
            "width": self.width,
            "height": self.height,
            "rig_id": self.rig_id,
            "camera": formats.camera_to_doc(self.camera),
            "params": formats.params_to_doc(self.params),
            "keypoints": [
                {"id": o.id, "u": o.u, "v": o.v, "conf": o.conf,
                 "visible": o.visible, "prompt": o.prompt}
                for o in sorted(self.keypoints.values(), key=lambda o: o.id)
            ],
            "fit_count": len(self.history),
            "dirty": self.dirty,
        }


class ServiceState:
    def __init__(self, data_dir, rigs=None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.rigs = rigs or {"default": make_default_rig(seed=0)}
        self.sessions = {}
        self._load_sessions()

    def _session_path(self, sid):
        return self.data_dir / f"{sid}.session.json"

    def _load_sessions(self):
        for path in sorted(self.data_dir.glob("*.session.json")):
            try:
                doc = formats.load_json(path)
                sid = doc["session_id"]
                cam = formats.camera_from_doc(doc["camera"])
                params = formats.params_from_doc(doc["params"])
                kps = {
                    int(k["id"]): Observation2D(
                        id=int(k["id"]), u=float(k["u"]), v=float(k["v"]),
                        conf=float(k.get("conf", 1.0)),
                        visible=bool(k.get("visible", True)),
                        prompt=bool(k.get("prompt", False)))
                    for k in doc["keypoints"]
                }
                s = Session(sid, doc["image_ref"], doc["width"], doc["height"],
                            doc.get("rig_id", "default"), cam, params, kps)
                s.history = doc.get("history", [])
                self.sessions[sid] = s
            except (SchemaError, KeyError, ValueError):
                continue

    def journal(self, session):
        doc = session.state_doc()
        doc["history"] = session.history
        tmp = self._session_path(session.id).with_suffix(".tmp")
        formats.dump_json(doc, tmp)
        tmp.replace(self._session_path(session.id))

    def rig_of(self, session):
        return self.rigs[session.rig_id]


def default_keypoints(rig, params, camera):
    """Initial editable keypoints: projections of the current parameters."""
    _, tg = forward_kinematics(rig, params)
    joints = np.asarray(tg)
    Xc = camera.to_camera(joints)
    z = Xc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    out = {}
    for j in range(rig.n_joints):
        out[j] = Observation2D(
            id=j,
            u=float(camera.fx * Xc[j, 0] / zs[j] + camera.cx),
            v=float(camera.fy * Xc[j, 1] / zs[j] + camera.cy),
            conf=1.0, visible=bool(front[j]), prompt=False)
    return out


def create_app(data_dir, rigs=None, ui_dir=None):
    state = ServiceState(data_dir, rigs)
    app = FastAPI(title="rigfit annotation service", version=__version__)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"])
    app.state.rigfit = state

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        # schema violations are 400s in this API (422 means under-constrained)
        return _err(400, str(exc.errors()[:3]))

    def get_session(sid):
        return state.sessions.get(sid)

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/v1/rigs")
    def rigs_index():
        return [
            {"id": rid, "n_joints": r.n_joints, "n_vertices": r.n_vertices,
             "joint_names": list(r.joint_names),
             "bones": [[int(r.parents[j]), j] for j in range(1, r.n_joints)],
             "keypoint_maps": r.keypoint_maps}
            for rid, r in state.rigs.items()
        ]

    @app.get("/v1/sessions")
    def list_sessions():
        return [
            {"session_id": s.id, "image_ref": s.image_ref,
             "width": s.width, "height": s.height,
             "fit_count": len(s.history)}
            for s in state.sessions.values()
        ]

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: SessionCreate):
        if body.rig_id not in state.rigs:
            return _err(400, f"unknown rig {body.rig_id!r}")
        rig = state.rigs[body.rig_id]
        try:
            if body.camera is not None:
                cam = formats.camera_from_doc(body.camera)
            else:
                cam = camera_from_fov(60.0, body.width, body.height)
            if body.init_params is not None:
                params = formats.params_from_doc(body.init_params)
                params.validate(rig)
            else:
                params = RigParams.rest(rig)
                params.root_translation = cam.rotation.T @ (
                    np.array([0.0, 0.0, 3.0]) - cam.translation)
        except (SchemaError, RigfitError) as e:
            return _err(400, str(e))
        kps = default_keypoints(rig, params, cam)
        if body.keypoints:
            for k in body.keypoints:
                kps[k.id] = Observation2D(id=k.id, u=k.u, v=k.v, conf=k.conf,
                                          visible=k.visible, prompt=k.prompt)
        sid = uuid.uuid4().hex[:12]
        session = Session(sid, body.image_ref, body.width, body.height,
                          body.rig_id, cam, params, kps)
        state.sessions[sid] = session
        state.journal(session)
        return {"session_id": sid}

    @app.get("/v1/sessions/{sid}")
    def get_state(sid: str):
        s = get_session(sid)
        if s is None:
            return _err(404, "unknown session")
        return s.state_doc()

    @app.put("/v1/sessions/{sid}/keypoints")
    def put_keypoints(sid: str, body: KeypointsPut):
        s = get_session(sid)
        if s is None:
            return _err(404, "unknown session")
        rig = state.rig_of(s)
        for k in body.keypoints:
            if not (0 <= k.id < rig.n_joints or
                    VERTEX_ID_BASE <= k.id < VERTEX_ID_BASE + rig.n_vertices):
                return _err(400, f"unknown keypoint id {k.id}")
            if not 0.0 <= k.conf <= 1.0:
                return _err(400, f"confidence {k.conf} outside [0, 1]")
        with s.mutate_lock:
            for k in body.keypoints:
                s.keypoints[k.id] = Observation2D(
                    id=k.id, u=k.u, v=k.v, conf=k.conf, visible=k.visible,
                    prompt=k.prompt)
            s.dirty = True
            state.journal(s)
        return s.state_doc()

    @app.post("/v1/sessions/{sid}/fit")
    def run_fit(sid: str, body: FitRequest):
        s = get_session(sid)
        if s is None:
            return _err(404, "unknown session")
        if body.mode not in ("full", "prompted"):
            return _err(400, f"unknown fit mode {body.mode!r}")
        rig = state.rig_of(s)
        try:
            config = (FitConfig() if not body.config else
                      _config_from_dict(body.config))
        except (SchemaError, TypeError) as e:
            return _err(400, f"bad config: {e}")
        if not s.fit_lock.acquire(blocking=False):
            return _err(409, "a fit is already running for this session")
        try:
            obs = list(s.keypoints.values())
            if body.mode == "prompted":
                prompts = [(o.id, (o.u, o.v)) for o in obs
                           if o.prompt and o.visible]
                if not prompts:
                    return _err(422, "prompted fit needs >= 1 prompt-flagged "
                                     "visible keypoint")
                result = prompted_refine(rig, s.params, s.camera, prompts,
                                         config=config)
            else:
                try:
                    result = fit_single_view(rig, s.params, s.camera, obs,
                                             config=config)
                except UnderConstrainedError as e:
                    return _err(422, str(e))
            report = formats.fit_report_doc(
                result, {"mode": body.mode, "config": body.config or {}})
            with s.mutate_lock:
                s.params = result.params
                s.history.append(report)
                s.dirty = False
                state.journal(s)
            return report
        finally:
            s.fit_lock.release()

    @app.get("/v1/sessions/{sid}/overlay")
    def overlay(sid: str, vertices: int = 64):
        s = get_session(sid)
        if s is None:
            return _err(404, "unknown session")
        rig = state.rig_of(s)
        _, tg = forward_kinematics(rig, s.params)
        joints = np.asarray(tg)
        cam = s.camera
        Xc = cam.to_camera(joints)
        z = Xc[:, 2]
        joints2d = []
        for j in range(rig.n_joints):
            if z[j] <= 1e-6:
                continue
            joints2d.append({
                "id": j,
                "u": float(cam.fx * Xc[j, 0] / z[j] + cam.cx),
                "v": float(cam.fy * Xc[j, 1] / z[j] + cam.cy),
            })
        verts2d = []
        vsample = default_vertex_sample(rig, vertices)
        if vsample.size:
            verts = np.asarray(skin_vertices(rig, s.params))[vsample]
            Vc = cam.to_camera(verts)
            vz = Vc[:, 2]
            for i, vid in enumerate(vsample):
                if vz[i] <= 1e-6:
                    continue
                verts2d.append({
                    "id": int(VERTEX_ID_BASE + vid),
                    "u": float(cam.fx * Vc[i, 0] / vz[i] + cam.cx),
                    "v": float(cam.fy * Vc[i, 1] / vz[i] + cam.cy),
                })
        return {
            "joints2d": joints2d,
            "bones": [[int(rig.parents[j]), j] for j in range(1, rig.n_joints)],
            "vertices2d_sample": verts2d,
        }

    if ui_dir is not None:
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")
    app.mount("/files", StaticFiles(directory=state.data_dir), name="files")
    return app


def _config_from_dict(data):
    from .cli import _nested_config

    return _nested_config(FitConfig, data)
