"""Interactive manipulation service.

One session owns one live spring-mass state and ticks it at a fixed rate;
grabbed anchors are position-pinned to their drag targets (position tracks
the target across the tick's substeps, velocity matches the target motion).
Clients speak JSON over a WebSocket; commands are applied strictly between
ticks, so a drag is never injected mid-step. A malformed message or a
diverging simulation never takes the loop down: the session answers with an
error event (and auto-pauses on divergence).
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .binding import interpolate_centers
from .core import PhysicalAttributes, SceneBundle, attributes_to_dict, bundle_to_dict
from .identify import ParameterRanges
from .simulator import IntegrationDivergence, step
from .core import SpringMassState

log = logging.getLogger("elastica")

GAUSSIAN_STREAM_CAP = 2048  # downsample limit for gaussian snapshots


@dataclass
class Session:
    """Mutable simulation session; owned by exactly one loop."""

    bundle: SceneBundle
    attrs: PhysicalAttributes
    hz: float = 30.0
    ranges: ParameterRanges = field(default_factory=ParameterRanges)
    paused: bool = False
    frame: int = 0

    def __post_init__(self):
        self.positions = self.bundle.anchors.positions.copy()
        self.velocities = self.bundle.anchors.velocities.copy()
        # anchor id -> (current pin position, drag target)
        self.controllers: dict[int, np.ndarray] = {}
        self._pin_prev: dict[int, np.ndarray] = {}
        self.last_error: str | None = None

    @property
    def n_anchors(self) -> int:
        return self.positions.shape[0]

    def _frame_dt(self) -> float:
        cfg = self.bundle.config
        return cfg.dt * cfg.substeps_per_frame

    def tick(self) -> dict:
        """Advance one frame; returns the state snapshot message."""
        cfg = self.bundle.config
        substeps = cfg.substeps_per_frame
        frame_dt = self._frame_dt()
        pins = {aid: (self._pin_prev[aid], tgt) for aid, tgt in self.controllers.items()}
        try:
            state = SpringMassState(self.positions, self.velocities, self.frame)
            for s in range(substeps):
                state = step(state, self.bundle.topology, self.attrs, cfg)
                if pins:
                    pos = state.positions.copy()
                    vel = state.velocities.copy()
                    frac = (s + 1) / substeps
                    for aid, (prev, tgt) in pins.items():
                        pos[aid] = prev + (tgt - prev) * frac
                        vel[aid] = (tgt - prev) / frame_dt
                    state = SpringMassState(pos, vel, state.time_index)
            self.positions = state.positions.copy()
            self.velocities = state.velocities.copy()
        except IntegrationDivergence as exc:
            self.paused = True
            self.last_error = str(exc)
            return {"type": "error", "code": "divergence", "message": str(exc)}
        for aid, (_, tgt) in pins.items():
            self._pin_prev[aid] = tgt.copy()
        self.frame += 1
        return self.snapshot()

    def snapshot(self, detail: str = "anchors") -> dict:
        msg = {
            "type": "state",
            "frame": self.frame,
            "anchors": self.positions.tolist(),
        }
        if detail == "gaussians":
            centers = interpolate_centers(
                self.bundle.binding,
                self.positions,
                rest_anchors=self.bundle.anchors.positions,
                rest_centers=self.bundle.gaussians.centers,
            )
            n = centers.shape[0]
            stride = max(1, int(np.ceil(n / GAUSSIAN_STREAM_CAP)))
            msg["gaussians"] = {
                "centers": centers[::stride].tolist(),
                "colors": self.bundle.gaussians.colors[::stride].tolist(),
                "scales": self.bundle.gaussians.scales[::stride].tolist(),
            }
        return msg

    # -- commands -----------------------------------------------------------

    def handle_message(self, msg: dict) -> dict:
        """Apply one client command; returns an ack/params/error event."""
        if not isinstance(msg, dict) or "type" not in msg:
            return {"type": "error", "code": "bad_message", "message": "missing type"}
        kind = msg["type"]
        try:
            if kind == "grab":
                aid = self._anchor_id(msg)
                self.controllers[aid] = self.positions[aid].copy()
                self._pin_prev[aid] = self.positions[aid].copy()
                return {"type": "ack", "op": "grab", "anchor": aid}
            if kind == "release":
                aid = self._anchor_id(msg)
                self.controllers.pop(aid, None)
                self._pin_prev.pop(aid, None)
                return {"type": "ack", "op": "release", "anchor": aid}
            if kind == "drag":
                aid = self._anchor_id(msg)
                if aid not in self.controllers:
                    return {
                        "type": "error",
                        "code": "not_grabbed",
                        "message": f"anchor {aid} is not grabbed",
                    }
                pos = np.asarray(msg["pos"], dtype=np.float64)
                if pos.shape != (3,) or not np.isfinite(pos).all():
                    raise ValueError("drag pos must be a finite [x, y, z]")
                self.controllers[aid] = pos
                return {"type": "ack", "op": "drag", "anchor": aid}
            if kind == "pause":
                self.paused = True
                return {"type": "ack", "op": "pause"}
            if kind == "resume":
                self.paused = False
                return {"type": "ack", "op": "resume"}
            if kind == "reset":
                self.positions = self.bundle.anchors.positions.copy()
                self.velocities = self.bundle.anchors.velocities.copy()
                self.controllers.clear()
                self._pin_prev.clear()
                return {"type": "ack", "op": "reset"}
            if kind == "set_params":
                return self._set_params(msg)
            if kind == "subscribe":
                detail = msg.get("detail", "anchors")
                if detail not in ("anchors", "gaussians"):
                    raise ValueError(f"unknown detail {detail!r}")
                return {"type": "ack", "op": "subscribe", "detail": detail}
            return {"type": "error", "code": "unknown_type", "message": f"unknown type {kind!r}"}
        except (KeyError, TypeError, ValueError) as exc:
            return {"type": "error", "code": "bad_message", "message": str(exc)}

    def _anchor_id(self, msg) -> int:
        aid = int(msg["anchor"])
        if not 0 <= aid < self.n_anchors:
            raise ValueError(f"anchor {aid} out of range [0, {self.n_anchors})")
        return aid

    def _set_params(self, msg: dict) -> dict:
        names = {"mass": "mass", "stiffness": "stiffness", "damping": "damping", "friction": "friction"}
        current = {
            "mass": self.attrs.mass,
            "stiffness": self.attrs.stiffness,
            "damping": self.attrs.damping,
            "friction": self.attrs.friction,
        }
        for key in msg:
            if key == "type":
                continue
            if key not in names:
                return {"type": "error", "code": "bad_param", "message": f"unknown parameter {key!r}"}
            current[key] = float(msg[key])
        candidate = PhysicalAttributes(**current)
        if not self.ranges.contains(candidate):
            lo, hi = self.ranges.lows(), self.ranges.highs()
            return {
                "type": "error",
                "code": "range",
                "message": (
                    f"parameters out of range; valid (m, k, d, f) ranges are "
                    f"{list(zip(lo.tolist(), hi.tolist()))}"
                ),
            }
        self.attrs = candidate
        return {"type": "params", "values": attributes_to_dict(self.attrs)}


# ---------------------------------------------------------------------------
# FastAPI wiring


def create_app(bundle: SceneBundle, attrs: PhysicalAttributes | None = None,
               hz: float = 30.0, ui_dir=None):
    """Build the service app: GET /scene, GET /healthz, WS /ws."""
    session = Session(bundle=bundle, attrs=attrs or bundle.attributes, hz=hz)
    command_queue: asyncio.Queue = asyncio.Queue()
    subscribers: dict[object, dict] = {}

    async def loop():
        period = 1.0 / hz
        while True:
            t0 = asyncio.get_event_loop().time()
            # apply commands strictly between ticks, in arrival order
            replies = []
            while not command_queue.empty():
                ws, msg = command_queue.get_nowait()
                reply = session.handle_message(msg)
                if reply["type"] == "ack" and reply.get("op") == "subscribe":
                    subscribers[ws] = {"detail": reply["detail"]}
                replies.append((ws, reply))
            if not session.paused:
                result = session.tick()
            else:
                result = None
            for ws, reply in replies:
                if reply["type"] != "ack":
                    await _safe_send(ws, reply)
                elif reply.get("op") == "subscribe":
                    await _safe_send(ws, session.snapshot(subscribers[ws]["detail"]))
            if result is not None:
                if result["type"] == "error":
                    for ws in list(subscribers):
                        await _safe_send(ws, result)
                else:
                    for ws, info in list(subscribers.items()):
                        await _safe_send(ws, session.snapshot(info["detail"])
                                         if info["detail"] != "anchors" else result)
            elapsed = asyncio.get_event_loop().time() - t0
            await asyncio.sleep(max(0.0, period - elapsed))

    async def _safe_send(ws, payload):
        try:
            await ws.send_text(json.dumps(payload))
        except Exception:
            subscribers.pop(ws, None)

    @contextlib.asynccontextmanager
    async def lifespan(app):
        task = asyncio.create_task(loop())
        try:
            yield
        finally:
            task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await task

    app = FastAPI(lifespan=lifespan)
    app.state.session = session

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.get("/scene")
    async def scene():
        d = bundle_to_dict(bundle)
        d.pop("trajectory", None)
        d["ranges"] = session.ranges.to_dict()
        d["attributes"] = attributes_to_dict(session.attrs)
        return d

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        subscribers[ws] = {"detail": "anchors"}
        await _safe_send(ws, session.snapshot())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError as exc:
                    await _safe_send(
                        ws,
                        {"type": "error", "code": "bad_json", "message": str(exc)},
                    )
                    continue
                await command_queue.put((ws, msg))
        except WebSocketDisconnect:
            pass
        finally:
            subscribers.pop(ws, None)

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
