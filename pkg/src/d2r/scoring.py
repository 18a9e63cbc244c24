"""Arrangement scoring: image-caption similarity with caption normalization.

Three interchangeable scorers share one interface:
  * OracleScorer   - deterministic geometric stand-in computable from synthetic
                     ground truth; reads candidate pose metadata, never pixels.
  * RemoteScorer   - HTTP client for a live vision-language service.
  * ReplayScorer   - replays responses recorded from any scorer, for offline
                     deterministic runs (see RecordingScorer).

Wire protocol: POST {endpoint}/v1/similarity with JSON
{"images": [<base64 PNG>, ...], "captions": [<str>, ...]} ->
{"similarities": [[row per image, column per caption]]}; GET /healthz -> "ok".
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests
from PIL import Image

from .geometry import Pose, quat_to_matrix
from .render import RenderedArrangement

EPS_DEFAULT = 1e-4
ORACLE_NEUTRAL_SIM = 0.5


class ScoringError(Exception):
    pass


class TransportError(ScoringError):
    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class ProtocolError(ScoringError):
    pass


class ConfigurationError(ScoringError):
    pass


class ReplayMissError(ScoringError):
    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray           # (n_images, n_captions) in [-1, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ProtocolError("similarity matrix must be 2-D")
        if not np.all(np.isfinite(v)):
            raise ProtocolError("similarity matrix contains non-finite values")
        object.__setattr__(self, "values", v)


class Scorer(Protocol):
    def score_batch(self, arrangements: Sequence[RenderedArrangement],
                    captions: Sequence[str]) -> np.ndarray:
        """(n_images, n_captions) similarity array."""
        ...


def batch_similarity(scorer: Scorer, images: Sequence[RenderedArrangement],
                     captions: Sequence[str]) -> SimilarityMatrix:
    """Validated batch similarity: shape (len(images), len(captions))."""
    if not images or not captions:
        raise ConfigurationError("images and captions must be nonempty")
    values = np.asarray(scorer.score_batch(images, captions), dtype=np.float64)
    if values.shape != (len(images), len(captions)):
        raise ProtocolError(
            f"scorer returned shape {values.shape}, expected {(len(images), len(captions))}")
    return SimilarityMatrix(values)


def normalized_score(goal_sim: float, norm_sim: float, eps: float = EPS_DEFAULT) -> float:
    """Goal similarity divided by the (clamped) normalizing similarity."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    return goal_sim / max(norm_sim, eps)


# ---------------------------------------------------------------------------
# geometric oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelationSpec:
    """Ground-truth geometric target for synthetic tasks.

    kind 'point': distance to target; 'ring': |xy distance to center - radius|;
    'line': distance to the line through the referenced objects' positions.
    An optional orientation term measures the angle between the rotated body
    axis and a world axis.  goal_caption identifies which caption receives the
    geometric similarity; all others score the neutral constant.
    """
    kind: str
    goal_caption: str
    sigma_pos: float = 0.05
    target: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float = 0.0
    line_points: np.ndarray | None = None      # (k, 3), k >= 2
    axis_body: np.ndarray | None = None
    axis_world: np.ndarray | None = None
    sigma_rot: float = 0.5

    @staticmethod
    def from_dict(d: dict, object_positions: dict[str, np.ndarray] | None = None
                  ) -> "RelationSpec":
        kind = d["kind"]
        line_points = None
        if kind == "line":
            ids = d.get("object_ids", [])
            if len(ids) < 2:
                raise ConfigurationError("line relation needs >= 2 object_ids")
            positions = object_positions or {}
            missing = [i for i in ids if i not in positions]
            if missing:
                raise ConfigurationError(f"relation references unknown objects {missing}")
            line_points = np.array([positions[i] for i in ids], dtype=np.float64)
        axis_body = d.get("axis_body")
        return RelationSpec(
            kind=kind,
            goal_caption=d["goal_caption"],
            sigma_pos=float(d.get("sigma_pos", 0.05)),
            target=np.asarray(d["target"], dtype=np.float64) if "target" in d else None,
            center=np.asarray(d["center"], dtype=np.float64) if "center" in d else None,
            radius=float(d.get("radius", 0.0)),
            line_points=line_points,
            axis_body=np.asarray(axis_body, dtype=np.float64) if axis_body else None,
            axis_world=np.asarray(d["axis_world"], dtype=np.float64) if axis_body else None,
            sigma_rot=float(d.get("sigma_rot", 0.5)),
        )

    def position_error(self, p: np.ndarray) -> float:
        if self.kind == "point":
            return float(np.linalg.norm(p - self.target))
        if self.kind == "ring":
            return float(abs(np.linalg.norm(p[:2] - self.center[:2]) - self.radius))
        if self.kind == "line":
            a = self.line_points[0]
            direction = self.line_points[-1] - a
            direction = direction / np.linalg.norm(direction)
            off = p - a
            return float(np.linalg.norm(off - np.dot(off, direction) * direction))
        raise ConfigurationError(f"unknown relation kind {self.kind!r}")

    def pose_error_sq(self, pose: Pose) -> float:
        d2 = (self.position_error(np.asarray(pose.translation)) / self.sigma_pos) ** 2
        if self.axis_body is not None:
            rotated = quat_to_matrix(pose.rotation) @ self.axis_body
            cosang = np.clip(np.dot(rotated, self.axis_world)
                             / (np.linalg.norm(rotated) * np.linalg.norm(self.axis_world)),
                             -1.0, 1.0)
            d2 += (np.arccos(cosang) / self.sigma_rot) ** 2
        return d2


class OracleScorer:
    """Similarity from ground-truth geometry: exp(-d^2) against the goal
    caption, a neutral constant against everything else.  Requires candidate
    pose metadata on each arrangement."""

    def __init__(self, relation: RelationSpec):
        self.relation = relation

    def score_batch(self, arrangements, captions):
        for arr in arrangements:
            if arr.candidate_pose is None:
                raise ConfigurationError(
                    "oracle scorer needs candidate_pose metadata on renders")
        out = np.full((len(arrangements), len(captions)), ORACLE_NEUTRAL_SIM)
        goal_cols = [j for j, c in enumerate(captions)
                     if c == self.relation.goal_caption]
        if not goal_cols:
            return out
        for i, arr in enumerate(arrangements):
            sim = float(np.exp(-self.relation.pose_error_sq(arr.candidate_pose)))
            for j in goal_cols:
                out[i, j] = sim
        return out


def oracle_score(arrangement: RenderedArrangement,
                 relation: RelationSpec) -> tuple[float, float]:
    """(goal_sim, norm_sim) of one arrangement under the geometric oracle."""
    sims = OracleScorer(relation).score_batch(
        [arrangement], [relation.goal_caption, ""])
    return float(sims[0, 0]), float(sims[0, 1])


# ---------------------------------------------------------------------------
# remote client
# ---------------------------------------------------------------------------

def encode_image_png(rgb: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(rgb.astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class RemoteScorer:
    """Client for the /v1/similarity wire protocol.  Splits large batches,
    bounds in-flight requests, and preserves input order."""

    def __init__(self, endpoint: str, timeout: float = 30.0, max_retries: int = 2,
                 batch_size: int = 64, max_inflight: int = 4):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.batch_size = batch_size
        self.max_inflight = max_inflight

    def _post_chunk(self, images: list[str], captions: list[str]) -> np.ndarray:
        body = {"images": images, "captions": list(captions)}
        last_error = "unknown"
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(self.endpoint + "/v1/similarity", json=body,
                                     timeout=self.timeout)
            except requests.RequestException as e:
                last_error = str(e)
                continue
            if resp.status_code != 200:
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                continue
            try:
                values = np.asarray(resp.json()["similarities"], dtype=np.float64)
            except (KeyError, ValueError, json.JSONDecodeError) as e:
                raise ProtocolError(f"malformed similarity response: {e}") from e
            if values.shape != (len(images), len(captions)):
                raise ProtocolError(
                    f"similarity response shape {values.shape} != "
                    f"{(len(images), len(captions))}")
            return values
        raise TransportError(f"similarity request failed: {last_error}",
                             retries=self.max_retries)

    def score_batch(self, arrangements, captions):
        encoded = [encode_image_png(a.rgb) for a in arrangements]
        chunks = [(lo, encoded[lo:lo + self.batch_size])
                  for lo in range(0, len(encoded), self.batch_size)]
        results: dict[int, np.ndarray] = {}
        with ThreadPoolExecutor(max_workers=self.max_inflight) as pool:
            futures = {pool.submit(self._post_chunk, chunk, captions): lo
                       for lo, chunk in chunks}
            for fut, lo in futures.items():
                results[lo] = fut.result()
        return np.concatenate([results[lo] for lo, _ in chunks], axis=0)

    def healthcheck(self) -> bool:
        try:
            resp = requests.get(self.endpoint + "/healthz", timeout=self.timeout)
        except requests.RequestException:
            return False
        return resp.status_code == 200


# ---------------------------------------------------------------------------
# record / replay
# ---------------------------------------------------------------------------

def _request_key(rgb: np.ndarray, captions: Sequence[str]) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(rgb.astype(np.uint8)).tobytes())
    h.update(json.dumps({"shape": list(rgb.shape), "captions": list(captions)},
                        sort_keys=True).encode())
    return h.hexdigest()


class ReplayScorer:
    """Serves recorded similarity rows keyed by image content and captions."""

    def __init__(self, fixture_path: str | Path):
        path = Path(fixture_path)
        if not path.exists():
            raise ConfigurationError(f"replay fixture not found: {path}")
        with open(path) as f:
            data = json.load(f)
        self.entries: dict[str, list[float]] = data.get("entries", {})

    def score_batch(self, arrangements, captions):
        rows = []
        for a in arrangements:
            key = _request_key(a.rgb, captions)
            if key not in self.entries:
                raise ReplayMissError(f"no recorded response for request {key[:12]}...")
            rows.append(self.entries[key])
        return np.asarray(rows, dtype=np.float64)


class RecordingScorer:
    """Wraps a scorer and records every (image, captions) -> row pair into a
    replay fixture file."""

    def __init__(self, inner: Scorer, fixture_path: str | Path):
        self.inner = inner
        self.path = Path(fixture_path)
        self.entries: dict[str, list[float]] = {}
        if self.path.exists():
            with open(self.path) as f:
                self.entries = json.load(f).get("entries", {})

    def score_batch(self, arrangements, captions):
        values = np.asarray(self.inner.score_batch(arrangements, captions),
                            dtype=np.float64)
        for a, row in zip(arrangements, values):
            self.entries[_request_key(a.rgb, captions)] = [float(x) for x in row]
        self.save()
        return values

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as f:
            json.dump({"entries": dict(sorted(self.entries.items()))}, f, indent=0,
                      sort_keys=True)
