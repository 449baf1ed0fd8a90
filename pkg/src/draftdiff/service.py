"""HTTP facade: draft synthesis, mask preview, and iterative editing sessions.

Sessions are append-only JSONL logs; every image is content-addressed on
disk. Replaying a session log through the same model reproduces the final
image bit-exactly, which is the integration-level determinism check.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import codec as codec_mod
from . import imageio, metrics as M, rle, schedule as sched
from .config import RunConfig
from .dataset import ATTRIBUTE_LEVELS, CATEGORIES, OCCASIONS, PALETTES, canonical_skeleton
from .masks import RegionRules, apply_manual_edit, mask_for
from .prompts import PromptHierarchy
from .sampler import EditRequest, SamplerConfig, edit as run_edit, synthesize_draft
from .trainer import DiffusionModel


def _err(status: int, message: str):
    return JSONResponse(status_code=status, content={"error": message})


def _png_payload(img: np.ndarray) -> tuple[str, str]:
    png = imageio.png_bytes(img)
    return base64.b64encode(png).decode(), hashlib.sha256(png).hexdigest()[:16]


class Session:
    def __init__(self, sid: str, hierarchy: PromptHierarchy, log_path: Path):
        self.id = sid
        self.hierarchy = hierarchy
        self.log_path = log_path
        self.lock = threading.Lock()
        self.history: list[dict] = []
        self.current_draft: np.ndarray | None = None
        self.current_levels: dict[str, str] = {}

    def append(self, record: dict) -> None:
        self.history.append(record)
        with open(self.log_path, "a") as f:
            f.write(json.dumps(record) + "\n")


class Studio:
    """Shared model snapshot plus the session registry."""

    def __init__(self, model: DiffusionModel, codec, s, sampler_cfg: SamplerConfig,
                 data_dir: Path, edit_defaults):
        self.model = model
        self.codec = codec
        self.schedule = s
        self.sampler_cfg = sampler_cfg
        self.edit_defaults = edit_defaults
        self.data_dir = Path(data_dir)
        (self.data_dir / "sessions").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "images").mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self._counter = 0
        self._counter_lock = threading.Lock()

    def new_session(self, hierarchy: PromptHierarchy) -> Session:
        with self._counter_lock:
            self._counter += 1
            sid = f"s{self._counter:06d}-{hashlib.sha256(json.dumps(hierarchy.to_dict()).encode()).hexdigest()[:6]}"
        session = Session(sid, hierarchy, self.data_dir / "sessions" / f"{sid}.jsonl")
        session.append(
            {"event": "created", "hierarchy": hierarchy.to_dict(), "ts": time.time()}
        )
        self.sessions[sid] = session
        return session

    def store_image(self, img: np.ndarray) -> tuple[str, str]:
        b64, digest = _png_payload(img)
        path = self.data_dir / "images" / f"{digest}.png"
        if not path.exists():
            imageio.save_png(path, img)
        return b64, digest

    def vocab_tokens(self) -> set:
        return set(self.model.vocab.tokens)

    def cfg_with(self, seed: int, steps=None, cfg_scale=None) -> SamplerConfig:
        return dataclasses.replace(
            self.sampler_cfg,
            seed=seed,
            steps=self.sampler_cfg.steps if steps is None else int(steps),
            cfg_scale=self.sampler_cfg.cfg_scale if cfg_scale is None else float(cfg_scale),
        )


def _mask_for_session(session: Session, attribute: str) -> np.ndarray:
    length = session.current_levels.get("clothing_length")
    if length is None:
        for tok in session.hierarchy.low:
            if tok.startswith("clothing_length:"):
                length = tok.split(":", 1)[1]
    return mask_for(
        attribute, canonical_skeleton(), RegionRules(clothing_length=length or "knee")
    )


def build_app(model_path=None, codec_path=None, data_dir="studio_data",
              run_config: RunConfig | None = None, *, studio: Studio | None = None,
              static_dir=None) -> FastAPI:
    cfg = run_config or RunConfig()
    if studio is None:
        model, _meta = DiffusionModel.load(model_path)
        model.freeze()
        codec = codec_mod.load_codec(codec_path) if codec_path else codec_mod.IdentityCodec()
        s = sched.build_linear(cfg.train.timesteps, cfg.train.beta_start, cfg.train.beta_end)
        studio = Studio(model, codec, s, cfg.sampler, Path(data_dir), cfg.edit)

    app = FastAPI(title="draftdiff studio service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    app.state.studio = studio

    @app.get("/vocabulary")
    def vocabulary():
        return {
            "high": {
                "category": [f"category:{c}" for c in CATEGORIES],
                "style": [f"style:{p}" for p in PALETTES],
                "occasion": [f"occasion:{o}" for o in OCCASIONS],
            },
            "low": {
                a: [f"{a}:{v}" for v in levels] for a, levels in ATTRIBUTE_LEVELS.items()
            },
            "tokens": list(studio.model.vocab.tokens),
        }

    @app.post("/sessions")
    async def create_session(request: Request):
        body = await request.json()
        h = body.get("hierarchy")
        if not isinstance(h, dict) or "high" not in h or "low" not in h:
            return _err(400, "body must carry hierarchy {high, low[, interval_fraction]}")
        try:
            hierarchy = PromptHierarchy.from_dict(h)
        except (ValueError, KeyError) as e:
            return _err(400, str(e))
        unknown = [
            t for t in hierarchy.high + hierarchy.low if t not in studio.vocab_tokens()
        ]
        if unknown:
            return _err(400, f"unknown tokens: {unknown}")
        session = studio.new_session(hierarchy)
        return JSONResponse(status_code=201, content={"session_id": session.id})

    def _get_session(sid: str) -> Session | None:
        return studio.sessions.get(sid)

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = _get_session(sid)
        if session is None:
            return _err(404, f"unknown session {sid}")
        return {
            "session_id": sid,
            "hierarchy": session.hierarchy.to_dict(),
            "history": session.history,
            "current_levels": session.current_levels,
        }

    @app.post("/sessions/{sid}/draft")
    async def draft(sid: str, request: Request):
        session = _get_session(sid)
        if session is None:
            return _err(404, f"unknown session {sid}")
        body = await request.json()
        if "seed" not in body:
            return _err(400, "seed is required")
        if not session.lock.acquire(blocking=False):
            return _err(409, "a job for this session is already running")
        try:
            scfg = studio.cfg_with(int(body["seed"]), body.get("steps"),
                                   body.get("cfg_scale"))
            img = synthesize_draft(
                session.hierarchy.high, studio.model, studio.codec, studio.schedule, scfg
            )
            b64, digest = studio.store_image(img)
            # session state is the stored artifact: keep the PNG-quantized image
            session.current_draft = imageio.from_uint8(imageio.to_uint8(img))
            session.current_levels = {}
            session.append(
                {
                    "event": "draft",
                    "request": {"seed": int(body["seed"]), "steps": scfg.steps,
                                "cfg_scale": scfg.cfg_scale},
                    "image_hash": digest,
                    "levels": {},
                    "ts": time.time(),
                }
            )
            return {"image_png_base64": b64, "image_hash": digest}
        finally:
            session.lock.release()

    @app.post("/sessions/{sid}/edit")
    async def edit_endpoint(sid: str, request: Request):
        session = _get_session(sid)
        if session is None:
            return _err(404, f"unknown session {sid}")
        body = await request.json()
        if "seed" not in body:
            return _err(400, "seed is required")
        attribute = body.get("attribute")
        level = body.get("level")
        if not attribute or not level:
            return _err(400, "attribute and level are required")
        cats = [t.split(":")[0] for t in session.hierarchy.low]
        if attribute not in cats:
            return _err(422, f"attribute {attribute!r} not in this session's hierarchy")
        if f"{attribute}:{level}" not in studio.vocab_tokens():
            return _err(400, f"unknown level {level!r} for attribute {attribute!r}")
        if body.get("draft_hash"):
            # restore a prior history state as the edit's base image
            match = next(
                (r for r in session.history if r.get("image_hash") == body["draft_hash"]),
                None,
            )
            if match is None:
                return _err(400, f"draft_hash {body['draft_hash']!r} not in this session")
            session.current_draft = imageio.load_png(
                studio.data_dir / "images" / f"{body['draft_hash']}.png"
            )
            session.current_levels = dict(match.get("levels", {}))
        if session.current_draft is None:
            return _err(400, "no draft yet; POST /draft first")
        if not session.lock.acquire(blocking=False):
            return _err(409, "a job for this session is already running")
        try:
            if body.get("mask_rle"):
                mask = rle.decode(body["mask_rle"])
            else:
                mask = _mask_for_session(session, attribute)
            strokes = body.get("manual_strokes") or []
            try:
                mask = apply_manual_edit(mask, strokes)
            except ValueError as e:
                return _err(400, str(e))
            req = EditRequest(
                draft=session.current_draft,
                attribute=attribute,
                level=level,
                mask=mask,
                rho=float(body.get("rho", studio.edit_defaults.rho)),
                inner_steps=int(
                    body.get("inner_steps", studio.edit_defaults.inner_steps)
                ),
                keypoints=canonical_skeleton(),
                seed=int(body["seed"]),
            )
            scfg = studio.cfg_with(int(body["seed"]), body.get("steps"),
                                   body.get("cfg_scale"))
            img = run_edit(
                req, studio.model, studio.codec, studio.schedule,
                session.hierarchy, scfg,
            )
            nte = M.non_target_error(img, session.current_draft, mask)
            b64, digest = studio.store_image(img)
            session.current_draft = imageio.from_uint8(imageio.to_uint8(img))
            session.current_levels[attribute] = level
            session.append(
                {
                    "event": "edit",
                    "request": {
                        "attribute": attribute, "level": level,
                        "seed": int(body["seed"]), "rho": req.rho,
                        "inner_steps": req.inner_steps,
                        "mask_rle": rle.encode(mask),
                        "steps": scfg.steps, "cfg_scale": scfg.cfg_scale,
                        "draft_hash": body.get("draft_hash"),
                    },
                    "image_hash": digest,
                    "levels": dict(session.current_levels),
                    "non_target_error": nte,
                    "ts": time.time(),
                }
            )
            return {
                "image_png_base64": b64,
                "image_hash": digest,
                "non_target_error": nte,
            }
        finally:
            session.lock.release()

    @app.get("/sessions/{sid}/mask_preview")
    def mask_preview(sid: str, attribute: str = ""):
        session = _get_session(sid)
        if session is None:
            return _err(404, f"unknown session {sid}")
        if attribute not in ATTRIBUTE_LEVELS:
            return _err(400, f"unknown attribute {attribute!r}")
        mask = _mask_for_session(session, attribute)
        png = imageio.png_bytes_gray(mask)
        return {
            "mask_png_base64": base64.b64encode(png).decode(),
            "mask_rle": rle.encode(mask),
        }

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="studio")

    return app


def replay_session(log_path, model: DiffusionModel, codec, s,
                   sampler_cfg: SamplerConfig) -> list[str]:
    """Re-run a session log from its recorded seeds; returns the image hashes."""
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines()]
    hierarchy = None
    current = None
    by_hash: dict[str, np.ndarray] = {}
    hashes = []

    def remember(img):
        digest = hashlib.sha256(imageio.png_bytes(img)).hexdigest()[:16]
        quantized = imageio.from_uint8(imageio.to_uint8(img))
        by_hash[digest] = quantized
        hashes.append(digest)
        return quantized

    for rec in records:
        if rec["event"] == "created":
            hierarchy = PromptHierarchy.from_dict(rec["hierarchy"])
        elif rec["event"] == "draft":
            q = rec["request"]
            cfg = dataclasses.replace(sampler_cfg, seed=q["seed"], steps=q["steps"],
                                      cfg_scale=q["cfg_scale"])
            current = remember(synthesize_draft(hierarchy.high, model, codec, s, cfg))
        elif rec["event"] == "edit":
            q = rec["request"]
            if q.get("draft_hash"):
                current = by_hash[q["draft_hash"]]
            cfg = dataclasses.replace(sampler_cfg, seed=q["seed"], steps=q["steps"],
                                      cfg_scale=q["cfg_scale"])
            req = EditRequest(
                draft=current,
                attribute=q["attribute"],
                level=q["level"],
                mask=rle.decode(q["mask_rle"]),
                rho=q["rho"],
                inner_steps=q["inner_steps"],
                keypoints=canonical_skeleton(),
                seed=q["seed"],
            )
            current = remember(run_edit(req, model, codec, s, hierarchy, cfg))
    return hashes
