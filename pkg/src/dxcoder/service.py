"""Human-in-the-loop coding service: ranked code suggestions for free text,
an append-only decision log (accept / reject / augment / finalize), and a
deterministic JSONL export of finalized visits.

The event log is the single source of truth. Every acknowledged decision is
appended durably (flush + fsync) before the caller sees the result, replay
in ascending event-id order reconstructs the exact service state, and the
export is a pure function of the log.
"""

import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .corpus import clean_text
from .model import ModelState, assemble_batch, forward, load_checkpoint, predict
from .terminology import ConceptGraph, search
from .tokenizer import Vocabulary, encode, load_vocab


class ServiceError(ValueError):
    """Bad request content (unknown code, malformed event, bad argument)."""


class ConflictError(ServiceError):
    """Write rejected by lifecycle rules (finalized record, reused id)."""


ACTIONS = ("accept", "reject", "augment", "finalize")


# --- suggestions ---------------------------------------------------------------


@dataclass(frozen=True)
class Suggestion:
    code: str
    term: str
    probability: float
    above_threshold: bool


@dataclass(frozen=True)
class SuggestBundle:
    """Everything inference needs: trained weights, the vocabulary they were
    trained with, and the class-column code order."""

    state: ModelState
    vocab: Vocabulary
    codes: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.codes) != self.state.config.n_classes:
            raise ServiceError(
                f"{len(self.codes)} codes for {self.state.config.n_classes} classes"
            )
        if self.vocab.size != self.state.config.vocab_size:
            raise ServiceError(
                f"vocabulary size {self.vocab.size} does not match model "
                f"vocab_size {self.state.config.vocab_size}"
            )
        if len(set(self.codes)) != len(self.codes):
            raise ServiceError("duplicate codes in the class list")


def save_codes(codes: Sequence[str], path: str | Path) -> None:
    Path(path).write_text(json.dumps(list(codes), indent=0) + "\n", encoding="utf-8")


def load_codes(path: str | Path) -> tuple[str, ...]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, list) or not all(isinstance(c, str) for c in obj):
        raise ServiceError(f"{path}: expected a JSON list of code strings")
    return tuple(obj)


def load_bundle(
    checkpoint_path: str | Path, vocab_path: str | Path, codes_path: str | Path
) -> SuggestBundle:
    return SuggestBundle(
        state=load_checkpoint(checkpoint_path),
        vocab=load_vocab(vocab_path),
        codes=load_codes(codes_path),
    )


def suggest(
    bundle: SuggestBundle,
    text: str,
    graph: ConceptGraph | None = None,
    top_k: int = 20,
    threshold: float = 0.5,
) -> list[Suggestion]:
    """Clean, encode, and score the text; return the top_k codes by
    probability (ties broken by code), flagged against the threshold."""
    if top_k < 0:
        raise ServiceError(f"top_k must be nonnegative, got {top_k}")
    if not (0.0 <= threshold <= 1.0):
        raise ServiceError(f"threshold must be in [0, 1], got {threshold!r}")
    ids, _truncated = encode(bundle.vocab, clean_text(text))
    batch_ids, mask = assemble_batch([ids])
    logits = forward(bundle.state, batch_ids, mask, train_mode=False)
    probs, _ = predict(logits[0], threshold)
    order = sorted(range(len(bundle.codes)), key=lambda i: (-probs[i], bundle.codes[i]))
    out = []
    for i in order[:top_k]:
        code = bundle.codes[i]
        term = ""
        if graph is not None and code in graph.concepts:
            term = graph.concepts[code][0]
        out.append(
            Suggestion(
                code=code,
                term=term,
                probability=float(probs[i]),
                above_threshold=bool(probs[i] > threshold),
            )
        )
    return out


# --- decision log ----------------------------------------------------------------


@dataclass(frozen=True)
class DecisionEvent:
    event_id: int
    record_id: str
    timestamp_ms: int
    action: str
    code: str | None
    actor: str

    def __post_init__(self) -> None:
        if not isinstance(self.event_id, int) or self.event_id < 1:
            raise ServiceError(f"event_id must be a positive integer, got {self.event_id!r}")
        if not self.record_id:
            raise ServiceError("record_id must be nonempty")
        if not self.actor:
            raise ServiceError("actor must be nonempty")
        if self.action not in ACTIONS:
            raise ServiceError(f"unknown action {self.action!r}, expected one of {ACTIONS}")
        if self.action == "finalize":
            if self.code is not None:
                raise ServiceError("finalize carries no code")
        elif not self.code:
            raise ServiceError(f"action {self.action!r} requires a code")

    def payload(self) -> tuple:
        """Identity for idempotency checks; the server-side timestamp is
        excluded so a retried request matches its original."""
        return (self.event_id, self.record_id, self.action, self.code, self.actor)


def replay(events: Sequence[DecisionEvent]) -> dict[str, dict]:
    """Fold events in ascending id order into per-record state."""
    out: dict[str, dict] = {}
    for ev in sorted(events, key=lambda e: e.event_id):
        state = out.setdefault(ev.record_id, {"codes": set(), "finalized": False})
        if ev.action in ("accept", "augment"):
            state["codes"].add(ev.code)
        elif ev.action == "reject":
            state["codes"].discard(ev.code)
        else:
            state["finalized"] = True
    return out


def _event_to_json(ev: DecisionEvent) -> str:
    obj = {
        "event_id": ev.event_id,
        "record_id": ev.record_id,
        "timestamp_ms": ev.timestamp_ms,
        "action": ev.action,
        "code": ev.code,
        "actor": ev.actor,
    }
    return json.dumps(obj, sort_keys=True)


def _event_from_json(line: str, where: str) -> DecisionEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as err:
        raise ServiceError(f"{where}: invalid JSON ({err})") from None
    if not isinstance(obj, dict):
        raise ServiceError(f"{where}: event must be a JSON object")
    expected = {"event_id", "record_id", "timestamp_ms", "action", "code", "actor"}
    if set(obj) != expected:
        raise ServiceError(f"{where}: event fields must be exactly {sorted(expected)}")
    try:
        return DecisionEvent(
            event_id=obj["event_id"],
            record_id=obj["record_id"],
            timestamp_ms=obj["timestamp_ms"],
            action=obj["action"],
            code=obj["code"],
            actor=obj["actor"],
        )
    except ServiceError as err:
        raise ServiceError(f"{where}: {err}") from None


class DecisionStore:
    """Append-only JSONL event log with a single serialized writer.

    Writes are validated against the replayed state, appended durably, and
    only then applied in memory, so an interrupted process can always be
    restarted over the same file with identical results.
    """

    def __init__(
        self,
        path: str | Path,
        known_codes: frozenset[str] | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.path = Path(path)
        self.known_codes = known_codes
        self._clock = clock
        self._lock = threading.Lock()
        self._events: list[DecisionEvent] = []
        self._by_id: dict[int, DecisionEvent] = {}
        self._state: dict[str, dict] = {}
        if self.path.exists():
            self._load()
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                ev = _event_from_json(line, f"{self.path}:{lineno}")
                if self._events and ev.event_id <= self._events[-1].event_id:
                    raise ServiceError(
                        f"{self.path}:{lineno}: event id {ev.event_id} does not "
                        f"increase past {self._events[-1].event_id}"
                    )
                record = self._state.get(ev.record_id)
                if record is not None and record["finalized"]:
                    raise ServiceError(
                        f"{self.path}:{lineno}: event for finalized record {ev.record_id}"
                    )
                self._apply(ev)

    def _apply(self, ev: DecisionEvent) -> None:
        self._events.append(ev)
        self._by_id[ev.event_id] = ev
        state = self._state.setdefault(ev.record_id, {"codes": set(), "finalized": False})
        if ev.action in ("accept", "augment"):
            state["codes"].add(ev.code)
        elif ev.action == "reject":
            state["codes"].discard(ev.code)
        else:
            state["finalized"] = True

    @property
    def n_events(self) -> int:
        return len(self._events)

    def events(self) -> list[DecisionEvent]:
        return list(self._events)

    def record(
        self, record_id: str, action: str, code: str | None, event_id: int, actor: str
    ) -> str:
        """Validate, durably append, and apply one decision. Returns "stored",
        or "duplicate" when the identical event was already acknowledged."""
        with self._lock:
            ev = DecisionEvent(
                event_id=event_id,
                record_id=record_id,
                timestamp_ms=int(self._clock() * 1000),
                action=action,
                code=code,
                actor=actor,
            )
            existing = self._by_id.get(ev.event_id)
            if existing is not None:
                if existing.payload() == ev.payload():
                    return "duplicate"
                raise ConflictError(
                    f"event id {ev.event_id} already stores a different event"
                )
            if self._events and ev.event_id <= self._events[-1].event_id:
                raise ServiceError(
                    f"event id {ev.event_id} must exceed the last id "
                    f"{self._events[-1].event_id}"
                )
            state = self._state.get(ev.record_id)
            if state is not None and state["finalized"]:
                raise ConflictError(f"record {ev.record_id} is finalized")
            if (
                ev.action in ("accept", "augment")
                and self.known_codes is not None
                and ev.code not in self.known_codes
            ):
                raise ServiceError(f"unknown code {ev.code!r}")
            self._fh.write(_event_to_json(ev) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._apply(ev)
            return "stored"

    def snapshot(self) -> dict[str, dict]:
        """Copy of per-record state: {record_id: {codes: set, finalized: bool}}."""
        return {
            rid: {"codes": set(s["codes"]), "finalized": s["finalized"]}
            for rid, s in self._state.items()
        }

    def records(self, status: str | None = None) -> list[dict]:
        if status not in (None, "pending", "finalized"):
            raise ServiceError(f"status must be pending or finalized, got {status!r}")
        rows = []
        for rid in sorted(self._state):
            state = self._state[rid]
            if status == "pending" and state["finalized"]:
                continue
            if status == "finalized" and not state["finalized"]:
                continue
            rows.append(
                {
                    "record_id": rid,
                    "codes": sorted(state["codes"]),
                    "finalized": state["finalized"],
                }
            )
        return rows

    def export_lines(self) -> list[str]:
        """One JSON line per finalized record, sorted by record id; the final
        code set is (accepted + augmented) minus rejected, by replay order."""
        lines = []
        for rid in sorted(self._state):
            state = self._state[rid]
            if not state["finalized"]:
                continue
            lines.append(
                json.dumps({"codes": sorted(state["codes"]), "record_id": rid},
                           sort_keys=True) + "\n"
            )
        return lines

    def close(self) -> None:
        self._fh.close()


# --- HTTP app ----------------------------------------------------------------------


def create_app(
    store: DecisionStore,
    bundle: SuggestBundle | None = None,
    graph: ConceptGraph | None = None,
    default_top_k: int = 20,
    default_threshold: float = 0.5,
):
    """FastAPI wiring over the pure service pieces. Domain errors map to
    400 (validation), 409 (lifecycle conflict), and 503 (component absent)."""
    from fastapi import FastAPI, HTTPException, Query
    from fastapi.responses import PlainTextResponse
    from pydantic import BaseModel, Field

    class SuggestRequest(BaseModel):
        text: str
        top_k: int | None = Field(default=None, ge=0)
        threshold: float | None = Field(default=None, ge=0.0, le=1.0)

    class DecisionRequest(BaseModel):
        record_id: str
        action: str
        code: str | None = None
        event_id: int
        actor: str

    app = FastAPI(title="diagnosis coding service")

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "model_loaded": bundle is not None,
            "terminology_loaded": graph is not None,
            "n_events": store.n_events,
        }

    @app.post("/suggest")
    def post_suggest(req: SuggestRequest):
        if bundle is None:
            raise HTTPException(status_code=503, detail="no model loaded")
        top_k = default_top_k if req.top_k is None else req.top_k
        threshold = default_threshold if req.threshold is None else req.threshold
        suggestions = suggest(bundle, req.text, graph, top_k=top_k, threshold=threshold)
        return {
            "suggestions": [
                {
                    "code": s.code,
                    "term": s.term,
                    "probability": s.probability,
                    "above_threshold": s.above_threshold,
                }
                for s in suggestions
            ]
        }

    @app.get("/records")
    def get_records(status: str | None = Query(default=None)):
        try:
            return {"records": store.records(status)}
        except ServiceError as err:
            raise HTTPException(status_code=400, detail=str(err)) from None

    @app.post("/decisions")
    def post_decision(req: DecisionRequest):
        try:
            outcome = store.record(
                record_id=req.record_id,
                action=req.action,
                code=req.code,
                event_id=req.event_id,
                actor=req.actor,
            )
        except ConflictError as err:
            raise HTTPException(status_code=409, detail=str(err)) from None
        except ServiceError as err:
            raise HTTPException(status_code=400, detail=str(err)) from None
        return {"status": outcome, "event_id": req.event_id}

    @app.get("/export")
    def get_export():
        return PlainTextResponse(
            "".join(store.export_lines()), media_type="application/x-ndjson"
        )

    @app.get("/search")
    def get_search(q: str = Query(default=""), limit: int = Query(default=20, ge=0)):
        if graph is None:
            raise HTTPException(status_code=503, detail="no terminology loaded")
        results = search(graph, q, limit) if limit > 0 and q else []
        return {"results": [{"code": c, "term": t} for c, t in results]}

    return app
