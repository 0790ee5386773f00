"""Fine-grained LLM reranking with just-in-time twin refinement.

Each coarse candidate is judged in an action-tagged JSON exchange: the
model either requests a bounded execution plan of tool calls (whose
outputs enrich the twin for the next turn) or returns a relevance
verdict. Invalid turns are re-asked with the validation error appended;
a candidate that stays invalid after two re-asks is degraded to the
sub-threshold tier instead of failing the query. The final ranking is a
permutation of the whole database: verified tier, then sub-threshold,
then uncandidated videos in coarse order.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

from .canon import canonical_json
from .decompose import REASONING_SCHEMA_ID, LlmClient, SubQuery
from .errors import PlanError, ToolTimeoutError
from .index import CoarseCandidate
from .twin import DigitalTwin, FrameRecord, serialize_twin

__all__ = [
    "MAX_PLAN_CALLS",
    "ReasonerVerdict",
    "PlanCall",
    "ExecutionPlan",
    "EnrichmentRecord",
    "Tool",
    "ToolRegistry",
    "StaticTool",
    "TimeoutTool",
    "build_rerank_prompt",
    "run_plan",
    "apply_enrichment",
    "extract_masks",
    "RankedEntry",
    "FinalRanking",
    "rerank",
]

logger = logging.getLogger(__name__)

MAX_PLAN_CALLS = 4
_MAX_REASKS = 2

_INPUT_MARKER = "\nINPUT:\n"

_RERANK_INSTRUCTIONS = """\
Judge whether the video described by the digital twin in the INPUT block
satisfies the query. Reply with a single JSON object, either
  {"action": "refine", "plan": {"calls": [{"tool": <registered tool>,
      "instance_ids": [<int>, ...], "frame_indices": [<int>, ...],
      "params": {<str>: <str>}}, ...]}}
to request up to 4 tool calls that enrich the twin before you decide, or
  {"action": "verdict", "verdict": {"relevance": <0..1>,
      "trace": <non-empty reasoning summary>, "object_ids": [<int>, ...]}}
where object_ids name the twin instances that satisfy the query.
When INPUT carries "forced_verdict": true you must return a verdict."""


@dataclass(frozen=True)
class ReasonerVerdict:
    relevance: float
    trace: str
    object_ids: tuple[int, ...]

    def to_obj(self) -> dict:
        return {
            "relevance": float(self.relevance),
            "trace": self.trace,
            "object_ids": list(self.object_ids),
        }


@dataclass(frozen=True)
class PlanCall:
    tool: str
    instance_ids: tuple[int, ...]
    frame_indices: tuple[int, ...] | None = None
    params: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class ExecutionPlan:
    calls: tuple[PlanCall, ...]


@dataclass(frozen=True)
class EnrichmentRecord:
    """One tool output (or failure) targeting one instance."""

    instance_id: int
    frame_indices: tuple[int, ...] | None  # None targets every frame
    text: str
    tool_name: str
    timestamp: float
    error: str | None = None


class Tool(Protocol):
    def describe(self, twin: DigitalTwin, instance_id: int,
                 frame_indices: tuple[int, ...] | None,
                 params: Mapping[str, str]) -> str: ...


class StaticTool:
    """Deterministic stub tool: emits a fixed-template description."""

    def __init__(self, template: str = "verified {category} {instance_id}"):
        self.template = template

    def describe(self, twin: DigitalTwin, instance_id: int,
                 frame_indices: tuple[int, ...] | None,
                 params: Mapping[str, str]) -> str:
        return self.template.format(category=twin.track_category(instance_id),
                                    instance_id=instance_id,
                                    video_id=twin.video_id)


class TimeoutTool:
    """Fault-injection stub: every call times out."""

    def describe(self, twin: DigitalTwin, instance_id: int,
                 frame_indices: tuple[int, ...] | None,
                 params: Mapping[str, str]) -> str:
        raise ToolTimeoutError("tool timed out")


class ToolRegistry:
    def __init__(self, tools: Mapping[str, Tool] | None = None):
        self._tools: dict[str, Tool] = dict(tools or {})

    def register(self, name: str, tool: Tool) -> None:
        if name in self._tools:
            raise ValueError(f"tool {name!r} already registered")
        self._tools[name] = tool

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._tools))

    def get(self, name: str) -> Tool:
        try:
            return self._tools[name]
        except KeyError:
            raise PlanError(f"unknown tool {name!r}") from None

    @classmethod
    def default(cls) -> "ToolRegistry":
        return cls({
            "appearance_describer": StaticTool("appearance of {category} {instance_id} confirmed"),
            "action_recognizer": StaticTool("{category} {instance_id} action re-examined"),
        })


def build_rerank_prompt(query: str, subqueries: Sequence[SubQuery], twin: DigitalTwin,
                        tool_names: Sequence[str], refinements_remaining: int,
                        turn: int, forced_verdict: bool) -> str:
    block = {
        "query": query,
        "subqueries": [{"text": sq.text, "kind": sq.kind} for sq in subqueries],
        "video_id": twin.video_id,
        "twin": json.loads(serialize_twin(twin)),
        "tools": list(tool_names),
        "refinements_remaining": refinements_remaining,
        "turn": turn,
        "forced_verdict": forced_verdict,
    }
    return _RERANK_INSTRUCTIONS + _INPUT_MARKER + canonical_json(block)


def _parse_plan(obj: dict) -> ExecutionPlan | str:
    plan = obj.get("plan")
    if not isinstance(plan, dict) or not isinstance(plan.get("calls"), list):
        return "refine action needs a 'plan' object with a 'calls' array"
    raw_calls = plan["calls"]
    if not raw_calls:
        return "plan has no calls"
    if len(raw_calls) > MAX_PLAN_CALLS:
        return f"plan has {len(raw_calls)} calls, maximum is {MAX_PLAN_CALLS}"
    calls: list[PlanCall] = []
    for i, raw in enumerate(raw_calls):
        if not isinstance(raw, dict) or not isinstance(raw.get("tool"), str):
            return f"call {i}: needs a string 'tool'"
        ids = raw.get("instance_ids")
        if (not isinstance(ids, list) or not ids
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in ids)):
            return f"call {i}: 'instance_ids' must be a non-empty integer array"
        frames = raw.get("frame_indices")
        if frames is not None:
            if not isinstance(frames, list) or not all(
                    isinstance(x, int) and not isinstance(x, bool) for x in frames):
                return f"call {i}: 'frame_indices' must be an integer array"
            frames = tuple(frames)
        params = raw.get("params", {})
        if not isinstance(params, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in params.items()):
            return f"call {i}: 'params' must map strings to strings"
        calls.append(PlanCall(raw["tool"], tuple(ids), frames,
                              tuple(sorted(params.items()))))
    return ExecutionPlan(tuple(calls))


def _parse_verdict(obj: dict, twin: DigitalTwin) -> ReasonerVerdict | str:
    verdict = obj.get("verdict")
    if not isinstance(verdict, dict):
        return "verdict action needs a 'verdict' object"
    relevance = verdict.get("relevance")
    if isinstance(relevance, bool) or not isinstance(relevance, (int, float)):
        return "'relevance' must be a number"
    if not 0.0 <= float(relevance) <= 1.0:
        return f"'relevance' {relevance} outside [0, 1]"
    trace = verdict.get("trace")
    if not isinstance(trace, str) or not trace.strip():
        return "'trace' must be a non-empty string"
    ids = verdict.get("object_ids", [])
    if not isinstance(ids, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in ids):
        return "'object_ids' must be an integer array"
    known = set(twin.track_ids())
    missing = [x for x in ids if x not in known]
    if missing:
        return f"object_ids {missing} do not resolve to twin tracks"
    return ReasonerVerdict(float(relevance), trace, tuple(ids))


def _parse_response(raw: str, twin: DigitalTwin,
                    forced: bool) -> tuple[ExecutionPlan | ReasonerVerdict | None, str | None]:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        return None, f"response is not valid JSON: {exc}"
    if not isinstance(obj, dict):
        return None, "response must be a JSON object"
    action = obj.get("action")
    if action == "refine":
        if forced:
            return None, "refinement budget exhausted: a verdict is required"
        plan = _parse_plan(obj)
        return (plan, None) if isinstance(plan, ExecutionPlan) else (None, plan)
    if action == "verdict":
        verdict = _parse_verdict(obj, twin)
        return (verdict, None) if isinstance(verdict, ReasonerVerdict) else (None, verdict)
    return None, "missing or unknown 'action' (expected 'refine' or 'verdict')"


def run_plan(plan: ExecutionPlan, twin: DigitalTwin,
             registry: ToolRegistry) -> list[EnrichmentRecord]:
    """Execute a validated plan, one record per (call, instance).

    Unknown tools or unresolvable targets reject the whole plan before
    any call runs; a tool timeout yields an error record for that call
    while the remaining calls still execute.
    """
    if len(plan.calls) > MAX_PLAN_CALLS:
        raise PlanError(f"plan has {len(plan.calls)} calls, maximum is {MAX_PLAN_CALLS}")
    known_tracks = set(twin.track_ids())
    known_frames = {frame.frame_index for frame in twin.frames}
    tools = []
    for call in plan.calls:
        tools.append(registry.get(call.tool))  # raises PlanError on unknown tool
        bad_ids = [i for i in call.instance_ids if i not in known_tracks]
        if bad_ids:
            raise PlanError(f"plan targets unknown instances {bad_ids} "
                            f"in video {twin.video_id!r}")
        if call.frame_indices is not None:
            bad_frames = [f for f in call.frame_indices if f not in known_frames]
            if bad_frames:
                raise PlanError(f"plan targets unknown frames {bad_frames} "
                                f"in video {twin.video_id!r}")

    records: list[EnrichmentRecord] = []
    for call, tool in zip(plan.calls, tools):
        params = dict(call.params)
        for instance_id in call.instance_ids:
            now = time.time()
            try:
                text = tool.describe(twin, instance_id, call.frame_indices, params)
                records.append(EnrichmentRecord(
                    instance_id, call.frame_indices, text, call.tool, now))
            except ToolTimeoutError as exc:
                logger.warning("tool %r timed out on instance %d", call.tool, instance_id)
                records.append(EnrichmentRecord(
                    instance_id, call.frame_indices, "", call.tool, now, error=str(exc)))
    return records


def apply_enrichment(twin: DigitalTwin,
                     records: Sequence[EnrichmentRecord]) -> DigitalTwin:
    """Append tool outputs as provenance-tagged attributes, append-only.

    Error records and records whose instance id does not resolve are
    skipped and reported via the module logger; the input document is
    never mutated.
    """
    usable: list[EnrichmentRecord] = []
    known = set(twin.track_ids())
    for record in records:
        if record.error is not None:
            logger.warning("skipping failed enrichment from %r: %s",
                           record.tool_name, record.error)
            continue
        if record.instance_id not in known:
            logger.warning("skipping enrichment for dangling instance %d in video %r",
                           record.instance_id, twin.video_id)
            continue
        usable.append(record)
    if not usable:
        return twin

    frames: list[FrameRecord] = []
    for frame in twin.frames:
        instances = []
        for inst in frame.instances:
            extra = [
                f"[{r.tool_name}] {r.text}"
                for r in usable
                if r.instance_id == inst.instance_id
                and (r.frame_indices is None or frame.frame_index in r.frame_indices)
            ]
            instances.append(inst.with_attributes(extra) if extra else inst)
        frames.append(replace(frame, instances=tuple(instances)))
    return replace(twin, frames=tuple(frames))


def extract_masks(verdict: ReasonerVerdict,
                  twin: DigitalTwin) -> dict[int, tuple[tuple[int, str], ...]]:
    """Per satisfying object: ordered (frame_index, mask_ref) pairs."""
    out: dict[int, tuple[tuple[int, str], ...]] = {}
    known = set(twin.track_ids())
    for object_id in verdict.object_ids:
        if object_id not in known:
            raise KeyError(f"object {object_id} not present in video {twin.video_id!r}")
        out[object_id] = tuple(
            (frame.frame_index, inst.mask_ref)
            for frame, inst in twin.observations(object_id))
    return out


@dataclass(frozen=True)
class RankedEntry:
    video_id: str
    tier: str  # "verified" | "sub_threshold" | "uncandidated"
    score: float
    coarse_score: float
    verdict: ReasonerVerdict | None = None
    masks: tuple[tuple[int, tuple[tuple[int, str], ...]], ...] = ()

    def to_obj(self) -> dict:
        return {
            "video_id": self.video_id,
            "tier": self.tier,
            "score": float(self.score),
            "coarse_score": float(self.coarse_score),
            "verdict": self.verdict.to_obj() if self.verdict else None,
            "masks": {
                str(object_id): [[frame, ref] for frame, ref in pairs]
                for object_id, pairs in self.masks
            },
        }


@dataclass(frozen=True)
class FinalRanking:
    entries: tuple[RankedEntry, ...]
    warnings: tuple[str, ...] = ()

    def video_ids(self) -> tuple[str, ...]:
        return tuple(entry.video_id for entry in self.entries)

    def rank_of(self, video_id: str) -> int:
        """1-based rank; raises KeyError when absent."""
        for i, entry in enumerate(self.entries):
            if entry.video_id == video_id:
                return i + 1
        raise KeyError(f"video {video_id!r} not in ranking")

    def to_obj(self) -> dict:
        return {
            "entries": [entry.to_obj() for entry in self.entries],
            "warnings": list(self.warnings),
        }


@dataclass
class _CandidateOutcome:
    verdict: ReasonerVerdict | None
    twin: DigitalTwin
    warnings: list[str] = field(default_factory=list)
    refined: bool = False


def _judge_candidate(query: str, subqueries: Sequence[SubQuery], twin: DigitalTwin,
                     llm: LlmClient, registry: ToolRegistry,
                     max_refinements: int) -> _CandidateOutcome:
    outcome = _CandidateOutcome(verdict=None, twin=twin)
    current = twin
    refinements = 0
    reasks = 0
    error_note: str | None = None
    while True:
        forced = refinements >= max_refinements
        prompt = build_rerank_prompt(query, subqueries, current, registry.names(),
                                     max_refinements - refinements, refinements, forced)
        if error_note is not None:
            prompt += f"\nPREVIOUS_RESPONSE_ERROR: {error_note}"
        raw = llm.complete(prompt, REASONING_SCHEMA_ID)
        parsed, error = _parse_response(raw, current, forced)

        if isinstance(parsed, ExecutionPlan):
            try:
                records = run_plan(parsed, current, registry)
            except PlanError as exc:
                error = str(exc)
            else:
                for record in records:
                    if record.error is not None:
                        outcome.warnings.append(
                            f"video {twin.video_id}: tool {record.tool_name!r} failed "
                            f"on instance {record.instance_id}: {record.error}")
                current = apply_enrichment(current, records)
                refinements += 1
                outcome.refined = True
                error_note = None
                continue

        if isinstance(parsed, ReasonerVerdict):
            outcome.verdict = parsed
            outcome.twin = current
            return outcome

        reasks += 1
        if reasks > _MAX_REASKS:
            outcome.warnings.append(
                f"video {twin.video_id}: degraded to sub_threshold after "
                f"{_MAX_REASKS} re-asks: {error}")
            outcome.twin = current
            return outcome
        error_note = error


def rerank(query: str, subqueries: Sequence[SubQuery],
           ranking: Sequence[CoarseCandidate], k: int,
           twins: Mapping[str, DigitalTwin], llm: LlmClient,
           tools: ToolRegistry | None = None, tau: float = 0.5,
           max_refinements: int = 2,
           on_enriched: Callable[[str, DigitalTwin], None] | None = None) -> FinalRanking:
    """Judge the top-k of a full coarse ranking and assemble the tiers.

    ranking must cover the whole database (rank_videos output); the
    first k entries become candidates. Verified entries (relevance >= tau)
    sort by relevance then coarse score then id; sub-threshold and
    uncandidated entries keep coarse order. Every video appears exactly
    once. Enriched twins are handed to on_enriched; the store itself is
    never written here.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    if max_refinements < 0:
        raise ValueError("max_refinements must be non-negative")
    if k < 1:
        raise ValueError(f"k={k} must be positive")
    registry = tools or ToolRegistry.default()

    candidates = list(ranking[:k])
    rest = list(ranking[k:])
    warnings: list[str] = []
    verified: list[RankedEntry] = []
    sub_threshold: list[RankedEntry] = []

    for candidate in candidates:
        twin = twins[candidate.video_id]
        outcome = _judge_candidate(query, subqueries, twin, llm, registry,
                                   max_refinements)
        warnings.extend(outcome.warnings)
        if outcome.refined and on_enriched is not None:
            on_enriched(candidate.video_id, outcome.twin)
        if outcome.verdict is None:
            sub_threshold.append(RankedEntry(
                candidate.video_id, "sub_threshold", candidate.score,
                candidate.score, None, ()))
            continue
        verdict = outcome.verdict
        masks = tuple(sorted(extract_masks(verdict, outcome.twin).items()))
        if verdict.relevance >= tau:
            verified.append(RankedEntry(
                candidate.video_id, "verified", verdict.relevance,
                candidate.score, verdict, masks))
        else:
            sub_threshold.append(RankedEntry(
                candidate.video_id, "sub_threshold", candidate.score,
                candidate.score, verdict, masks))

    verified.sort(key=lambda e: (-e.verdict.relevance, -e.coarse_score, e.video_id))
    sub_threshold.sort(key=lambda e: (-e.coarse_score, e.video_id))
    uncandidated = [
        RankedEntry(c.video_id, "uncandidated", c.score, c.score, None, ())
        for c in rest
    ]
    return FinalRanking(tuple(verified + sub_threshold + uncandidated), tuple(warnings))
