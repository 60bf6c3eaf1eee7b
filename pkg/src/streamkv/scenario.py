"""Scenario files: schema, validation, and deterministic stream synthesis.

A scenario is a versioned JSON document ("schema": 1) describing a short
annotated stream: clips with events, optional tool-gated events, tracked
objects, and one question with its evidence requirements, answer rule,
and candidate futures per planning mode. Validation failures name the
offending field path.

Token synthesis is seeded and reproducible. Background frames are noise;
a frame carrying an event gets a direction derived from the event kind
added to its tokens, and the question block is solved against layer 0's
query projection so that its query descriptor lands on the mean key of
the kinds it focuses on. That keeps relevance scoring non-degenerate
without any training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ScenarioError, UsageError
from .model import ModelConfig, ProjectionWeights, TokenBlock
from .prefill import Clip

SCHEMA_VERSION = 1
PLAN_MODES = ("reactive", "proactive", "speculative")
TOOL_GATES = ("zoom_in", "detailed_caption")

EVENT_GAIN = 4.0
NOISE_SCALE = 0.25


# ----------------------------------------------------------------------
# schema types
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    t: int
    kind: str
    payload: str
    frame: int = 0
    region: tuple[float, float, float, float] | None = None
    gated_by_tool: str | None = None


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True)
class ClipSpec:
    clip_id: int
    timestamp: int
    n_frames: int
    token_seed: int
    events: tuple[EventSpec, ...] = ()
    objects: tuple[ObjectSpec, ...] = ()


@dataclass(frozen=True)
class WatchTarget:
    kind: str                 # "region" | "count" | "caption"
    name: str = ""
    region: tuple[float, float, float, float] | None = None
    objects: tuple[ObjectSpec, ...] = ()


@dataclass(frozen=True)
class TrajectoryEvent:
    t: int
    kind: str
    description: str


@dataclass(frozen=True)
class CandidateFuture:
    trajectory: tuple[TrajectoryEvent, ...]
    g: float
    u: float
    watch_targets: tuple[WatchTarget, ...] = ()


@dataclass(frozen=True)
class AnswerRule:
    type: str                         # "count" | "last_payload"
    kind: str = ""                    # for count
    kinds: tuple[str, ...] = ()       # for last_payload

    def relevant_kinds(self) -> frozenset[str]:
        return frozenset((self.kind,)) if self.type == "count" else frozenset(self.kinds)


@dataclass(frozen=True)
class QuestionSpec:
    text: str
    asked_at: int
    required_evidence_events: tuple[str, ...]
    ground_truth: str
    answer_rule: AnswerRule
    candidate_futures: dict[str, CandidateFuture]
    focus_kinds: tuple[str, ...] = ()
    baseline_expected: str | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    clips: tuple[ClipSpec, ...]
    question: QuestionSpec
    config: ModelConfig = field(default_factory=ModelConfig)
    schema: int = SCHEMA_VERSION

    @property
    def horizon(self) -> int:
        return self.clips[-1].timestamp

    def clip_at(self, t: int) -> ClipSpec:
        for clip in self.clips:
            if clip.timestamp == t:
                return clip
        raise UsageError(f"no clip at t={t}")


# ----------------------------------------------------------------------
# validation helpers
# ----------------------------------------------------------------------

def _need(obj: dict, key: str, path: str):
    if key not in obj:
        raise ScenarioError(f"{path}.{key}: missing required field")
    return obj[key]


def _expect(value, types, path: str):
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
            types if isinstance(types, tuple) else (types,)):
        names = types.__name__ if not isinstance(types, tuple) else \
            "/".join(t.__name__ for t in types)
        raise ScenarioError(f"{path}: expected {names}, got {type(value).__name__}")
    return value


def _bbox(value, path: str) -> tuple[float, float, float, float]:
    _expect(value, list, path)
    if len(value) != 4:
        raise ScenarioError(f"{path}: bbox needs 4 numbers, got {len(value)}")
    for i, v in enumerate(value):
        _expect(v, (int, float), f"{path}[{i}]")
    x0, y0, x1, y1 = (float(v) for v in value)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ScenarioError(
            f"{path}: bbox must satisfy 0 <= min < max <= 1, got {value}")
    return (x0, y0, x1, y1)


def _event(obj: dict, path: str, timestamp: int, n_frames: int) -> EventSpec:
    _expect(obj, dict, path)
    t = _expect(_need(obj, "t", path), int, f"{path}.t")
    if t != timestamp:
        raise ScenarioError(
            f"{path}.t: event at t={t} sits in the clip at t={timestamp}")
    kind = _expect(_need(obj, "kind", path), str, f"{path}.kind")
    payload = _expect(_need(obj, "payload", path), str, f"{path}.payload")
    frame = _expect(obj.get("frame", 0), int, f"{path}.frame")
    if not 0 <= frame < n_frames:
        raise ScenarioError(
            f"{path}.frame: frame {frame} outside [0, {n_frames})")
    region = _bbox(obj["region"], f"{path}.region") if obj.get("region") is not None else None
    gate = obj.get("gated_by_tool")
    if gate is not None:
        _expect(gate, str, f"{path}.gated_by_tool")
        if gate not in TOOL_GATES:
            raise ScenarioError(
                f"{path}.gated_by_tool: {gate!r} not one of {TOOL_GATES}")
        if region is None:
            raise ScenarioError(f"{path}.region: gated events need a region")
    return EventSpec(t=t, kind=kind, payload=payload, frame=frame,
                     region=region, gated_by_tool=gate)


def _watch_target(obj: dict, path: str) -> WatchTarget:
    _expect(obj, dict, path)
    kind = _expect(_need(obj, "kind", path), str, f"{path}.kind")
    if kind not in ("region", "count", "caption"):
        raise ScenarioError(f"{path}.kind: {kind!r} not one of region/count/caption")
    name = _expect(obj.get("name", ""), str, f"{path}.name")
    region = None
    objects: tuple[ObjectSpec, ...] = ()
    if kind in ("region", "caption"):
        region = _bbox(_need(obj, "region", path), f"{path}.region")
    else:
        raw = _expect(_need(obj, "objects", path), dict, f"{path}.objects")
        if not raw:
            raise ScenarioError(f"{path}.objects: count target needs objects")
        objects = tuple(ObjectSpec(name=k, bbox=_bbox(v, f"{path}.objects[{k!r}]"))
                        for k, v in raw.items())
    return WatchTarget(kind=kind, name=name, region=region, objects=objects)


def _future(obj: dict, path: str, horizon: int) -> CandidateFuture:
    _expect(obj, dict, path)
    raw_traj = _expect(_need(obj, "trajectory", path), list, f"{path}.trajectory")
    traj = []
    for i, ev in enumerate(raw_traj):
        p = f"{path}.trajectory[{i}]"
        _expect(ev, dict, p)
        t = _expect(_need(ev, "t", p), int, f"{p}.t")
        if not 1 <= t <= horizon:
            raise ScenarioError(f"{p}.t: predicted t={t} outside [1, {horizon}]")
        traj.append(TrajectoryEvent(
            t=t, kind=_expect(_need(ev, "kind", p), str, f"{p}.kind"),
            description=_expect(_need(ev, "description", p), str, f"{p}.description")))
    g = float(_expect(_need(obj, "g", path), (int, float), f"{path}.g"))
    u = float(_expect(_need(obj, "u", path), (int, float), f"{path}.u"))
    for label, value in (("g", g), ("u", u)):
        if not 0.0 <= value <= 5.0:
            raise ScenarioError(f"{path}.{label}: score {value} outside [0, 5]")
    targets = tuple(_watch_target(w, f"{path}.watch_targets[{i}]")
                    for i, w in enumerate(obj.get("watch_targets", [])))
    return CandidateFuture(trajectory=tuple(traj), g=g, u=u, watch_targets=targets)


def parse_scenario(doc: dict, source: str = "scenario") -> Scenario:
    _expect(doc, dict, source)
    schema = _expect(_need(doc, "schema", source), int, f"{source}.schema")
    if schema != SCHEMA_VERSION:
        raise ScenarioError(
            f"{source}.schema: version {schema} unsupported (want {SCHEMA_VERSION})")
    name = _expect(_need(doc, "name", source), str, f"{source}.name")

    cfg_overrides = doc.get("config", {})
    _expect(cfg_overrides, dict, f"{source}.config")
    try:
        config = ModelConfig(**cfg_overrides)
    except TypeError as exc:
        raise ScenarioError(f"{source}.config: {exc}") from exc

    raw_clips = _expect(_need(doc, "clips", source), list, f"{source}.clips")
    if not raw_clips:
        raise ScenarioError(f"{source}.clips: need at least one clip")
    clips = []
    prev_id = None
    for i, raw in enumerate(raw_clips):
        path = f"{source}.clips[{i}]"
        _expect(raw, dict, path)
        clip_id = _expect(_need(raw, "clip_id", path), int, f"{path}.clip_id")
        if prev_id is not None and clip_id <= prev_id:
            raise ScenarioError(f"{path}.clip_id: {clip_id} does not increase")
        prev_id = clip_id
        timestamp = i + 1
        n_frames = _expect(_need(raw, "n_frames", path), int, f"{path}.n_frames")
        if n_frames < 1:
            raise ScenarioError(f"{path}.n_frames: must be >= 1, got {n_frames}")
        token_seed = _expect(_need(raw, "token_seed", path), int, f"{path}.token_seed")
        events = tuple(_event(e, f"{path}.events[{j}]", timestamp, n_frames)
                       for j, e in enumerate(raw.get("events", [])))
        objects = tuple(
            ObjectSpec(name=k, bbox=_bbox(v, f"{path}.objects[{k!r}]"))
            for k, v in _expect(raw.get("objects", {}), dict, f"{path}.objects").items())
        clips.append(ClipSpec(clip_id=clip_id, timestamp=timestamp,
                              n_frames=n_frames, token_seed=token_seed,
                              events=events, objects=objects))
    horizon = len(clips)

    qpath = f"{source}.question"
    raw_q = _expect(_need(doc, "question", source), dict, qpath)
    asked_at = _expect(_need(raw_q, "asked_at", qpath), int, f"{qpath}.asked_at")
    if not 1 <= asked_at <= horizon:
        raise ScenarioError(f"{qpath}.asked_at: {asked_at} outside [1, {horizon}]")
    required = _expect(_need(raw_q, "required_evidence_events", qpath), list,
                       f"{qpath}.required_evidence_events")
    declared_kinds = {e.kind for clip in clips for e in clip.events}
    for j, kind in enumerate(required):
        _expect(kind, str, f"{qpath}.required_evidence_events[{j}]")
        if kind not in declared_kinds:
            raise ScenarioError(
                f"{qpath}.required_evidence_events[{j}]: {kind!r} never occurs "
                f"in any clip")

    rpath = f"{qpath}.answer_rule"
    raw_rule = _expect(_need(raw_q, "answer_rule", qpath), dict, rpath)
    rtype = _expect(_need(raw_rule, "type", rpath), str, f"{rpath}.type")
    if rtype == "count":
        rule = AnswerRule(type="count",
                          kind=_expect(_need(raw_rule, "kind", rpath), str,
                                       f"{rpath}.kind"))
    elif rtype == "last_payload":
        kinds = _expect(_need(raw_rule, "kinds", rpath), list, f"{rpath}.kinds")
        if not kinds:
            raise ScenarioError(f"{rpath}.kinds: need at least one kind")
        for j, kind in enumerate(kinds):
            _expect(kind, str, f"{rpath}.kinds[{j}]")
        rule = AnswerRule(type="last_payload", kinds=tuple(kinds))
    else:
        raise ScenarioError(f"{rpath}.type: {rtype!r} not one of count/last_payload")

    fpath = f"{qpath}.candidate_futures"
    raw_futures = _expect(_need(raw_q, "candidate_futures", qpath), dict, fpath)
    futures: dict[str, CandidateFuture] = {}
    for mode, raw in raw_futures.items():
        if mode not in PLAN_MODES:
            raise ScenarioError(f"{fpath}.{mode}: not one of {PLAN_MODES}")
        futures[mode] = _future(raw, f"{fpath}.{mode}", horizon)
    if not futures:
        raise ScenarioError(f"{fpath}: need at least one candidate future")

    focus = tuple(_expect(k, str, f"{qpath}.focus_kinds[{j}]")
                  for j, k in enumerate(raw_q.get("focus_kinds", [])))
    baseline = raw_q.get("baseline_expected")
    if baseline is not None:
        baseline = _expect(baseline, str, f"{qpath}.baseline_expected")

    question = QuestionSpec(
        text=_expect(_need(raw_q, "text", qpath), str, f"{qpath}.text"),
        asked_at=asked_at,
        required_evidence_events=tuple(required),
        ground_truth=_expect(_need(raw_q, "ground_truth", qpath), str,
                             f"{qpath}.ground_truth"),
        answer_rule=rule,
        candidate_futures=futures,
        focus_kinds=focus or tuple(sorted(rule.relevant_kinds())),
        baseline_expected=baseline,
    )
    return Scenario(name=name, clips=tuple(clips), question=question, config=config)


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: not valid JSON ({exc})") from exc
    return parse_scenario(doc, source=p.name)


def scenario_to_dict(scenario: Scenario) -> dict:
    """Inverse of parse_scenario, for round-trip checks and tooling."""
    def bbox(b):
        return list(b) if b is not None else None

    clips = []
    for clip in scenario.clips:
        entry: dict = {
            "clip_id": clip.clip_id,
            "n_frames": clip.n_frames,
            "token_seed": clip.token_seed,
        }
        if clip.events:
            entry["events"] = [
                {k: v for k, v in {
                    "t": e.t, "kind": e.kind, "payload": e.payload,
                    "frame": e.frame,
                    "region": bbox(e.region),
                    "gated_by_tool": e.gated_by_tool,
                }.items() if v is not None}
                for e in clip.events]
        if clip.objects:
            entry["objects"] = {o.name: list(o.bbox) for o in clip.objects}
        clips.append(entry)

    q = scenario.question
    futures = {}
    for mode, fut in q.candidate_futures.items():
        futures[mode] = {
            "trajectory": [{"t": ev.t, "kind": ev.kind, "description": ev.description}
                           for ev in fut.trajectory],
            "g": fut.g, "u": fut.u,
            "watch_targets": [
                {k: v for k, v in {
                    "kind": w.kind, "name": w.name or None,
                    "region": bbox(w.region),
                    "objects": {o.name: list(o.bbox) for o in w.objects} or None,
                }.items() if v is not None}
                for w in fut.watch_targets],
        }
    rule: dict = {"type": q.answer_rule.type}
    if q.answer_rule.type == "count":
        rule["kind"] = q.answer_rule.kind
    else:
        rule["kinds"] = list(q.answer_rule.kinds)

    cfg = scenario.config
    return {
        "schema": scenario.schema,
        "name": scenario.name,
        "config": {
            "n_layers": cfg.n_layers, "d_model": cfg.d_model,
            "n_heads": cfg.n_heads, "n_kv_heads": cfg.n_kv_heads,
            "d_head": cfg.d_head, "tokens_per_frame": cfg.tokens_per_frame,
            "seed": cfg.seed,
        },
        "clips": clips,
        "question": {k: v for k, v in {
            "text": q.text,
            "asked_at": q.asked_at,
            "required_evidence_events": list(q.required_evidence_events),
            "ground_truth": q.ground_truth,
            "answer_rule": rule,
            "focus_kinds": list(q.focus_kinds),
            "baseline_expected": q.baseline_expected,
            "candidate_futures": futures,
        }.items() if v is not None},
    }


# ----------------------------------------------------------------------
# token synthesis
# ----------------------------------------------------------------------

def _kind_direction(kind: str, d_model: int) -> np.ndarray:
    """Stable unit vector for an event kind (sha256-seeded, not hash())."""
    digest = hashlib.sha256(kind.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d_model)
    return (v / np.linalg.norm(v)).astype(np.float32)


def generate_clip_tokens(clip: ClipSpec, config: ModelConfig,
                         start_position: int) -> Clip:
    """Deterministic frames for one clip, event directions mixed in."""
    rng = np.random.default_rng(clip.token_seed)
    frames = []
    pos = start_position
    for f in range(clip.n_frames):
        tokens = (rng.standard_normal((config.tokens_per_frame, config.d_model))
                  * NOISE_SCALE).astype(np.float32)
        for event in clip.events:
            if event.frame == f:
                tokens += EVENT_GAIN * _kind_direction(event.kind, config.d_model)
        positions = np.arange(pos, pos + config.tokens_per_frame, dtype=np.int64)
        frames.append(TokenBlock(tokens=tokens, positions=positions))
        pos += config.tokens_per_frame
    return Clip(clip_id=clip.clip_id, timestamp=clip.timestamp, frames=tuple(frames))


def generate_stream(scenario: Scenario) -> list[Clip]:
    """All clips of the scenario with consecutive stream positions."""
    clips = []
    pos = 0
    for spec in scenario.clips:
        clip = generate_clip_tokens(spec, scenario.config, pos)
        clips.append(clip)
        pos += clip.n_tokens
    return clips


def make_question_block(scenario: Scenario, weights: ProjectionWeights,
                        n_tokens: int = 4,
                        start_position: int = 0) -> TokenBlock:
    """Question tokens whose layer-0 query descriptor matches the mean key
    of the focus kinds' ideal event frame.

    d_model == n_heads * d_head makes layer 0's query projection square,
    so the token solving x @ W_q = target exists and is unique.
    """
    config = scenario.config
    kinds = scenario.question.focus_kinds
    if not kinds:
        raise UsageError(f"scenario {scenario.name} has no focus kinds")
    direction = np.mean([_kind_direction(k, config.d_model) for k in kinds], axis=0)
    ideal_key = (EVENT_GAIN * direction @ weights.w_k[0]).reshape(
        config.n_kv_heads, config.d_head)
    target = np.concatenate([ideal_key[config.kv_head_of(h)]
                             for h in range(config.n_heads)])
    token = np.linalg.solve(weights.w_q[0].astype(np.float64).T,
                            target.astype(np.float64)).astype(np.float32)
    rng = np.random.default_rng(config.seed + 7919)
    tokens = np.tile(token, (n_tokens, 1))
    tokens += (rng.standard_normal(tokens.shape) * 1e-3).astype(np.float32)
    positions = np.arange(start_position, start_position + n_tokens, dtype=np.int64)
    return TokenBlock(tokens=tokens.astype(np.float32), positions=positions)
