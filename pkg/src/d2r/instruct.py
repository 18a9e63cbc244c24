"""Instruction understanding: turn a rearrangement command into a task spec
(movable object, relevant objects, goal caption, normalizing caption) and
aggregate per-view object captions into one description.

Rule-based by default so tests are reproducible; a remote LLM endpoint can be
plugged in for open-vocabulary use.
"""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field

import requests

from .dataset import SceneObject, TaskSpec

# Binary spatial relations accepted by the closed grammar, longest first so
# "in front of" wins over "in".
RELATIONS = ["in front of", "to the left of", "to the right of",
             "left of", "right of", "inside", "beside", "near", "on"]

SHAPES = ["row", "line", "triangle", "x shape", "circle"]

RELATION_KEYWORDS = RELATIONS + SHAPES

_ARTICLES = {"a", "an", "the"}


class ParseError(ValueError):
    """Instruction does not fit the grammar or references unknown objects."""


@dataclass(frozen=True)
class Instruction:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ParseError("empty instruction")


@dataclass(frozen=True)
class ParsedTask:
    task: TaskSpec
    distractor_ids: list[str] = field(default_factory=list)


def _tokens(text: str) -> list[str]:
    words = re.findall(r"[a-z0-9]+", text.lower())
    return [w for w in words if w not in _ARTICLES]


def _stem(word: str) -> str:
    # Strip a plural "s" so "balls" matches "ball"; keep short words intact.
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def _overlap(phrase: str, caption: str) -> int:
    p = {_stem(w) for w in _tokens(phrase)}
    c = {_stem(w) for w in _tokens(caption)}
    return len(p & c)


def _resolve_one(phrase: str, objects: list[SceneObject]) -> SceneObject:
    scores = [(_overlap(phrase, o.aggregated_caption), o) for o in objects]
    best = max(s for s, _ in scores)
    if best == 0:
        names = [o.aggregated_caption or o.object_id for o in objects]
        raise ParseError(f"no object matches {phrase!r}; candidates: {names}")
    winners = [o for s, o in scores if s == best]
    if len(winners) > 1:
        names = [o.aggregated_caption or o.object_id for o in winners]
        raise ParseError(f"ambiguous phrase {phrase!r}; candidates: {names}")
    return winners[0]


def _resolve_many(phrase: str, objects: list[SceneObject]) -> list[SceneObject]:
    matched = [o for o in objects if _overlap(phrase, o.aggregated_caption) > 0]
    if not matched:
        names = [o.aggregated_caption or o.object_id for o in objects]
        raise ParseError(f"no object matches {phrase!r}; candidates: {names}")
    return matched


def _article(noun_phrase: str) -> str:
    stripped = noun_phrase.strip()
    return "an" if stripped[:1].lower() in "aeiou" else "a"


def _strip_articles(caption: str) -> str:
    words = caption.strip().split()
    while words and words[0].lower() in _ARTICLES:
        words = words[1:]
    return " ".join(words)


def _with_article(caption: str) -> str:
    bare = _strip_articles(caption)
    return f"{_article(bare)} {bare}"


def parse_instruction(instr: Instruction, objects: list[SceneObject],
                      endpoint: str | None = None,
                      timeout: float = 30.0) -> ParsedTask:
    """Closed-grammar parse of `put the <A> <relation> the <B>` and
    `put the <A> in a <shape> with the <B>`.  With an endpoint set, defers to
    the remote text model instead."""
    for o in objects:
        if not o.aggregated_caption:
            raise ParseError(f"object {o.object_id!r} has no aggregated caption")

    if endpoint is not None:
        return _parse_remote(instr, objects, endpoint, timeout)

    text = instr.text.strip().rstrip(".").lower()

    m = re.fullmatch(r"put the (.+?) in a (\w[\w ]*?) with the (.+)", text)
    if m:
        a_phrase, shape, b_phrase = m.group(1), m.group(2).strip(), m.group(3)
        if shape not in SHAPES:
            raise ParseError(f"unknown shape {shape!r}; supported: {SHAPES}")
        movable = _resolve_one(a_phrase, objects)
        group = _resolve_many(b_phrase, objects)
        relevant = {movable.object_id} | {o.object_id for o in group}
        goal = f"{_with_article(movable.aggregated_caption)} and the {b_phrase} in a {shape}"
        norm = f"{_with_article(movable.aggregated_caption)} and the {b_phrase}"
        return _finish(movable.object_id, relevant, goal, norm, objects)

    for rel in RELATIONS:
        m = re.fullmatch(rf"put the (.+?) {rel} the (.+)", text)
        if m:
            a_phrase, b_phrase = m.group(1), m.group(2)
            movable = _resolve_one(a_phrase, objects)
            other = _resolve_one(b_phrase, objects)
            if other.object_id == movable.object_id:
                raise ParseError("movable and reference object are the same")
            goal = (f"{_with_article(movable.aggregated_caption)} {rel} "
                    f"{_with_article(other.aggregated_caption)}")
            norm = (f"{_with_article(movable.aggregated_caption)} and "
                    f"{_with_article(other.aggregated_caption)}")
            return _finish(movable.object_id, {movable.object_id, other.object_id},
                           goal, norm, objects)

    raise ParseError(
        f"instruction {instr.text!r} does not match the grammar "
        f"`put the <object> <relation> the <object>` with relation in {RELATIONS} "
        f"or `put the <object> in a <shape> with the <objects>`")


def _finish(movable_id: str, relevant: set[str], goal: str, norm: str,
            objects: list[SceneObject]) -> ParsedTask:
    ordered_relevant = [o.object_id for o in objects if o.object_id in relevant]
    distractors = [o.object_id for o in objects if o.object_id not in relevant]
    return ParsedTask(
        task=TaskSpec(movable_object_id=movable_id,
                      relevant_object_ids=ordered_relevant,
                      goal_caption=goal,
                      normalizing_caption=norm),
        distractor_ids=distractors)


def _parse_remote(instr: Instruction, objects: list[SceneObject],
                  endpoint: str, timeout: float) -> ParsedTask:
    body = {
        "instruction": instr.text,
        "objects": [{"object_id": o.object_id, "caption": o.aggregated_caption}
                    for o in objects],
    }
    try:
        resp = requests.post(endpoint.rstrip("/") + "/v1/parse", json=body,
                             timeout=timeout)
    except requests.RequestException as e:
        raise ParseError(f"parse endpoint unreachable: {e}") from e
    if resp.status_code != 200:
        raise ParseError(f"parse endpoint returned {resp.status_code}: {resp.text[:200]}")
    data = resp.json()
    relevant = set(data["relevant_object_ids"])
    return _finish(data["movable_object_id"], relevant,
                   data["goal_caption"], data["normalizing_caption"], objects)


# ---------------------------------------------------------------------------
# caption aggregation
# ---------------------------------------------------------------------------

def _normalize_caption(c: str) -> str:
    return " ".join(c.strip().lower().split())


def aggregate_captions(per_view: list[str], endpoint: str | None = None,
                       timeout: float = 30.0) -> str:
    """One description from per-view captions: majority vote over normalized
    strings, ties broken by longest then lexicographic.  A remote endpoint,
    when given, takes precedence but falls back to the rule on failure."""
    if not per_view:
        raise ParseError("no captions to aggregate")

    if endpoint is not None:
        try:
            resp = requests.post(endpoint.rstrip("/") + "/v1/parse",
                                 json={"captions": per_view}, timeout=timeout)
            if resp.status_code == 200:
                agg = resp.json().get("caption", "")
                if agg:
                    return agg
            warnings.warn(f"caption endpoint returned {resp.status_code}; "
                          "falling back to majority vote")
        except requests.RequestException as e:
            warnings.warn(f"caption endpoint unreachable ({e}); "
                          "falling back to majority vote")

    counts = Counter(_normalize_caption(c) for c in per_view)
    top = max(counts.values())
    tied = [c for c, n in counts.items() if n == top]
    tied.sort(key=lambda c: (-len(c), c))
    return tied[0]


def aggregate_dataset_captions(objects: list[SceneObject],
                               endpoint: str | None = None,
                               view_limit: int | None = None) -> list[SceneObject]:
    """Aggregated-caption copies of the objects; view_limit restricts which
    per-view captions are considered (1 = first view only)."""
    out = []
    for o in objects:
        views = o.per_view_captions[:view_limit] if view_limit else o.per_view_captions
        agg = aggregate_captions(views, endpoint=endpoint)
        out.append(SceneObject(o.object_id, list(o.per_view_captions), agg))
    return out
