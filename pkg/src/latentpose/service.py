"""HTTP editing service consumed by the companion UI.

The service owns no training. Checkpoints load once at startup and stay
immutable; the only mutable state is the per-session record (one edit
vector, optionally one tuned generator copy), and every request for a
session runs under that session's lock. Rendered frames always come from
``w_inv + A @ delta``; nothing accumulates in image space.

Edits arrive as absolute attribute targets. The server re-estimates the
current frame, converts targets to a rescaled-space delta against that
estimate, and folds it into the session vector; repeated absolute edits
therefore cannot drift.
"""

from __future__ import annotations

import numbers

from fastapi import Body, FastAPI, File, UploadFile
from fastapi.responses import JSONResponse, Response

from .directions import delta_w, rescale
from .errors import ContractViolation
from .inversion import invert, pivotal_tune
from .toygen import ATTRIBUTE_NAMES
from .workspace import EditSession, Workspace, png_to_image


def _error(status: int, code: str, message: str, field: str | None = None) -> JSONResponse:
    body = {"error": {"code": code, "message": message}}
    if field is not None:
        body["error"]["field"] = field
    return JSONResponse(status_code=status, content=body)


def _params_payload(est) -> dict:
    vec = est.control_vector()
    return {
        "attributes": {name: float(vec[i]) for i, name in enumerate(ATTRIBUTE_NAMES)},
        "theta": [float(v) for v in est.theta],
        "expression": [float(v) for v in est.expression],
        "identity": [float(v) for v in est.identity],
    }


def build_app(workspace: Workspace, scheme: str = "synthetic") -> FastAPI:
    """Load checkpoints and assemble the API around them."""
    workspace.require("generator", "regressor", "embedder", "encoder", f"directions-{scheme}")
    generator = workspace.load_generator()
    regressor = workspace.load_regressor()
    embedder = workspace.load_embedder()
    encoder = workspace.load_encoder()
    model = workspace.load_directions(scheme)
    stats = model.stats
    if stats is None:
        raise ContractViolation(f"directions-{scheme} carries no calibration stats")

    app = FastAPI(title="latentpose editor service")

    def render_state(session: EditSession) -> tuple[str, object]:
        """Render the session's current latent and cache the PNG."""
        gen = session.tuned if session.tuned is not None else generator
        image = gen.render(session.w_inv + delta_w(model, session.delta))
        digest = workspace.store_image(image)
        return digest, regressor.estimate(image)

    def image_ref(digest: str) -> dict:
        return {"hash": digest, "url": f"/images/{digest}"}

    @app.get("/attributes")
    def attributes() -> dict:
        return {
            "attributes": [
                {
                    "name": name,
                    "index": i,
                    "low": float(stats.low[i]),
                    "high": float(stats.high[i]),
                }
                for i, name in enumerate(ATTRIBUTE_NAMES)
            ]
        }

    @app.post("/sessions")
    def create_session(file: UploadFile = File(...)):
        data = file.file.read()
        try:
            frame = png_to_image(data)
        except ContractViolation as exc:
            return _error(400, "invalid_image", str(exc), field="file")
        source_hash = workspace.store_image_bytes(data)
        w_inv = invert(encoder, frame)
        source_params = regressor.estimate(frame).control_vector()
        session = workspace.create_session(frame, w_inv, source_params, source_hash)
        digest, est = render_state(session)
        return {
            "session_id": session.session_id,
            "source": image_ref(source_hash),
            "preview": image_ref(digest),
            "params": _params_payload(est),
        }

    def lookup(session_id: str) -> EditSession | None:
        return workspace.session(session_id)

    def state_payload(session: EditSession, digest: str, est) -> dict:
        return {
            "image": image_ref(digest),
            "params": _params_payload(est),
            "delta": [float(v) for v in session.delta],
        }

    @app.post("/sessions/{session_id}/edit")
    def edit(session_id: str, payload: dict = Body(...)):
        session = lookup(session_id)
        if session is None:
            return _error(404, "unknown_session", f"no session '{session_id}'")
        targets = payload.get("targets")
        if not isinstance(targets, dict):
            return _error(400, "invalid_targets", "body must carry a 'targets' object", field="targets")
        for name, value in targets.items():
            if name not in ATTRIBUTE_NAMES:
                return _error(400, "unknown_attribute", f"'{name}' is not an editable attribute", field=name)
            if isinstance(value, bool) or not isinstance(value, numbers.Real):
                return _error(400, "invalid_value", f"target for '{name}' must be a number", field=name)
        with session.lock:
            _, current = render_state(session)
            p_cur = current.control_vector()
            p_goal = p_cur.clone()
            for name, value in targets.items():
                p_goal[ATTRIBUTE_NAMES.index(name)] = float(value)
            session.delta = session.delta + (rescale(p_goal, stats) - rescale(p_cur, stats))
            digest, est = render_state(session)
            return state_payload(session, digest, est)

    @app.post("/sessions/{session_id}/reenact")
    def reenact(session_id: str, file: UploadFile = File(...)):
        session = lookup(session_id)
        if session is None:
            return _error(404, "unknown_session", f"no session '{session_id}'")
        try:
            target = png_to_image(file.file.read())
        except ContractViolation as exc:
            return _error(400, "invalid_image", str(exc), field="file")
        p_t = regressor.estimate(target).control_vector()
        with session.lock:
            session.delta = rescale(p_t, stats) - rescale(session.source_params, stats)
            digest, est = render_state(session)
            return state_payload(session, digest, est)

    @app.post("/sessions/{session_id}/tune")
    def tune(session_id: str, payload: dict | None = Body(None)):
        session = lookup(session_id)
        if session is None:
            return _error(404, "unknown_session", f"no session '{session_id}'")
        steps = 200
        if payload is not None and "steps" in payload:
            raw = payload["steps"]
            if isinstance(raw, bool) or not isinstance(raw, numbers.Integral) or raw < 0:
                return _error(400, "invalid_value", "steps must be a non-negative integer", field="steps")
            steps = int(raw)
        with session.lock:
            tuned = pivotal_tune(
                generator, session.source_image, session.w_inv, steps=steps, embedder=embedder
            )
            workspace.attach_tuned(session, tuned)
            digest, est = render_state(session)
            return state_payload(session, digest, est)

    @app.get("/images/{digest}")
    def image(digest: str):
        data = workspace.image_bytes(digest)
        if data is None:
            return _error(404, "unknown_image", f"no cached image '{digest}'")
        return Response(content=data, media_type="image/png")

    @app.delete("/sessions/{session_id}")
    def delete(session_id: str):
        if not workspace.drop_session(session_id):
            return _error(404, "unknown_session", f"no session '{session_id}'")
        return {"deleted": session_id}

    return app
