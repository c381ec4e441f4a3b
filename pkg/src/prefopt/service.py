"""Interactive session service: the test-time loop split into HTTP calls so
a human (or any client) supplies the duel answers.

Each session persists as one JSON document, written atomically, including
its rng state, so a restart reproduces the pending pair and the next
proposal exactly.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .checkpoint import load_checkpoint
from .data import History, all_pairs, sobol_query_set
from .model import PreferencePolicy


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class Session:
    session_id: str
    model_id: str
    dimension: int
    budget: int
    selection_mode: str
    query_points: np.ndarray
    removed_pairs: list = field(default_factory=list)
    history_x1: list = field(default_factory=list)
    history_x2: list = field(default_factory=list)
    history_labels: list = field(default_factory=list)
    pending: dict | None = None  # {"pair": [i, j]}
    status: str = "active"
    rng_state: dict | None = None
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)

    @property
    def step(self) -> int:
        return len(self.history_labels)

    def history(self) -> History:
        h = History(dimension=self.dimension, budget=self.budget)
        for x1, x2, l in zip(self.history_x1, self.history_x2, self.history_labels):
            h.append(np.asarray(x1), np.asarray(x2), l)
        return h

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "model_id": self.model_id,
            "dimension": self.dimension,
            "budget": self.budget,
            "selection_mode": self.selection_mode,
            "query_points": self.query_points.tolist(),
            "removed_pairs": self.removed_pairs,
            "history_x1": self.history_x1,
            "history_x2": self.history_x2,
            "history_labels": self.history_labels,
            "pending": self.pending,
            "status": self.status,
            "rng_state": self.rng_state,
            "created": self.created,
            "updated": self.updated,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Session":
        doc = dict(doc)
        doc["query_points"] = np.asarray(doc["query_points"], dtype=np.float64)
        return cls(**doc)

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "status": self.status,
            "step": self.step,
            "budget": self.budget,
        }


class SessionStore:
    """One JSON file per session, atomic replace on every mutation."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.json"

    def save(self, session: Session) -> None:
        session.updated = time.time()
        tmp = self.path(session.session_id).with_suffix(".tmp")
        tmp.write_text(json.dumps(session.to_json()))
        tmp.replace(self.path(session.session_id))

    def load(self, session_id: str) -> Session:
        path = self.path(session_id)
        if not path.exists():
            raise ServiceError(404, "session_not_found", f"unknown session {session_id}")
        return Session.from_json(json.loads(path.read_text()))

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))


class SessionService:
    def __init__(self, models: dict[str, PreferencePolicy], store: SessionStore):
        self.models = models
        self.store = store
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _model(self, model_id: str) -> PreferencePolicy:
        if model_id not in self.models:
            raise ServiceError(404, "unknown_model", f"no model {model_id!r} loaded")
        return self.models[model_id]

    def create_session(
        self,
        model_id: str,
        budget: int,
        query_size: int = 64,
        candidates=None,
        dimension: int | None = None,
        selection_mode: str = "sample",
        seed: int | None = None,
    ) -> Session:
        model = self._model(model_id)
        if candidates is not None:
            points = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
            if points.shape[1] != model.cfg.dimension:
                raise ServiceError(
                    400,
                    "dimension_mismatch",
                    f"model expects dimension {model.cfg.dimension}, "
                    f"candidates have {points.shape[1]}",
                )
        else:
            dim = dimension if dimension is not None else model.cfg.dimension
            if dim != model.cfg.dimension:
                raise ServiceError(
                    400,
                    "dimension_mismatch",
                    f"model expects dimension {model.cfg.dimension}, got {dim}",
                )
            bounds = np.array([(-1.0, 1.0)] * dim)
            points = sobol_query_set(bounds, query_size)
        if selection_mode not in ("sample", "argmax"):
            raise ServiceError(400, "bad_request", "selection_mode must be sample or argmax")
        rng = np.random.default_rng(seed)
        session = Session(
            session_id=uuid.uuid4().hex,
            model_id=model_id,
            dimension=model.cfg.dimension,
            budget=int(budget),
            selection_mode=selection_mode,
            query_points=points,
            rng_state=rng.bit_generator.state,
        )
        self.store.save(session)
        return session

    def propose_pair(self, session_id: str) -> dict:
        with self._lock(session_id):
            session = self.store.load(session_id)
            if session.status != "active":
                raise ServiceError(409, "budget_exhausted", "session budget is spent")
            if session.pending is not None:
                return self._pending_payload(session)
            if session.step >= session.budget:
                session.status = "exhausted"
                self.store.save(session)
                raise ServiceError(409, "budget_exhausted", "session budget is spent")
            model = self._model(session.model_id)
            pairs = all_pairs(session.query_points.shape[0])
            removed = {tuple(p) for p in session.removed_pairs}
            live = np.asarray(
                [k for k, p in enumerate(pairs) if tuple(p) not in removed]
            )
            if live.size == 0:
                raise ServiceError(409, "pairs_exhausted", "no candidate pairs left")
            rng = np.random.default_rng()
            rng.bit_generator.state = session.rng_state
            with torch.no_grad():
                dist = model.forward_acquisition(
                    session.history(),
                    session.query_points,
                    pairs[live],
                    session.step + 1,
                    session.budget,
                )
                probs = dist.probs.numpy().astype(np.float64)
            if session.selection_mode == "argmax":
                choice = int(np.argmax(dist.logits.numpy()))
            else:
                probs = probs / probs.sum()
                choice = int(rng.choice(live.size, p=probs))
            i, j = (int(v) for v in pairs[live[choice]])
            session.pending = {"pair": [i, j]}
            session.rng_state = rng.bit_generator.state
            self.store.save(session)
            return self._pending_payload(session)

    def _pending_payload(self, session: Session) -> dict:
        i, j = session.pending["pair"]
        return {
            "session_id": session.session_id,
            "step": session.step + 1,
            "budget": session.budget,
            "pair_indices": [i, j],
            "x1": session.query_points[i].tolist(),
            "x2": session.query_points[j].tolist(),
        }

    def submit_preference(self, session_id: str, label: int) -> dict:
        if label not in (0, 1):
            raise ServiceError(400, "invalid_label", "label must be 0 or 1")
        with self._lock(session_id):
            session = self.store.load(session_id)
            if session.pending is None:
                raise ServiceError(409, "no_pending_pair", "nothing to answer")
            i, j = session.pending["pair"]
            session.history_x1.append(session.query_points[i].tolist())
            session.history_x2.append(session.query_points[j].tolist())
            session.history_labels.append(int(label))
            session.removed_pairs.append([i, j])
            session.pending = None
            if session.step >= session.budget:
                session.status = "exhausted"
            self.store.save(session)
            return self.session_state(session_id)

    def session_state(self, session_id: str) -> dict:
        session = self.store.load(session_id)
        payload = session.to_json()
        del payload["rng_state"]
        payload["step"] = session.step
        payload["belief"] = self._belief(session)
        if session.pending is not None:
            payload["pending_view"] = self._pending_payload(session)
        return payload

    def _belief(self, session: Session) -> list[dict]:
        if session.step == 0:
            return []
        model = self._model(session.model_id)
        seen: list[list[float]] = []
        for x in session.history_x1 + session.history_x2:
            if x not in seen:
                seen.append(x)
        pts = np.asarray(seen, dtype=np.float64)
        h = session.history()
        hx1, hx2, hl = h.arrays()
        with torch.no_grad():
            ctx = model.embed_duel(hx1, hx2, hl)
            lam = model.encode_query(ctx, model.embed_point(pts))
            pred = model.predict_gaussian(lam)
            mu = pred.mean.numpy()
            var = pred.var.numpy()
        order = np.argsort(-mu)
        return [
            {
                "point": seen[k],
                "mean": float(mu[k]),
                "var": float(var[k]),
                "rank": int(np.flatnonzero(order == k)[0]),
            }
            for k in range(len(seen))
        ]

    def list_sessions(self) -> list[dict]:
        return [self.store.load(sid).summary() for sid in self.store.list_ids()]


def create_app(
    model_path: Path | None = None,
    sessions_dir: Path = Path("sessions"),
    models: dict[str, PreferencePolicy] | None = None,
) -> FastAPI:
    if models is None:
        models = {}
        if model_path is not None:
            model, _, _ = load_checkpoint(model_path)
            model.eval()
            models["default"] = model
    service = SessionService(models, SessionStore(sessions_dir))
    app = FastAPI(title="prefopt session service")
    app.state.service = service
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(ServiceError)
    async def _service_error(_: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.post("/sessions")
    async def create_session(body: dict):
        allowed = {
            "model_id",
            "budget",
            "query_size",
            "candidates",
            "dimension",
            "selection_mode",
            "seed",
        }
        unknown = set(body) - allowed
        if unknown:
            raise ServiceError(400, "bad_request", f"unknown fields: {sorted(unknown)}")
        if "budget" not in body:
            raise ServiceError(400, "bad_request", "budget is required")
        session = service.create_session(
            model_id=body.get("model_id", "default"),
            budget=body["budget"],
            query_size=body.get("query_size", 64),
            candidates=body.get("candidates"),
            dimension=body.get("dimension"),
            selection_mode=body.get("selection_mode", "sample"),
            seed=body.get("seed"),
        )
        return service.session_state(session.session_id)

    @app.post("/sessions/{session_id}/propose")
    async def propose(session_id: str):
        return service.propose_pair(session_id)

    @app.post("/sessions/{session_id}/preference")
    async def preference(session_id: str, body: dict):
        if "label" not in body:
            raise ServiceError(400, "invalid_label", "label is required")
        return service.submit_preference(session_id, body["label"])

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        return service.session_state(session_id)

    @app.get("/sessions")
    async def list_sessions():
        return service.list_sessions()

    return app
