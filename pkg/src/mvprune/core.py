"""Shared domain types, validation errors, and deterministic JSON serialization.

Every serialized record is a single JSON object tagged with ``"fmt": 1`` and a
``"kind"`` string. Floats travel as JSON decimal text produced by Python's
``repr``, which round-trips ``float`` values bit-exactly, so writing and
re-reading a record yields an identical value and identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# errors


class ContractError(ValueError):
    """A caller violated a documented precondition or a type invariant."""


class ConfigError(ValueError):
    """A configuration value is out of its documented range."""


class ParseError(ValueError):
    """A serialized record is malformed.

    Carries the offending ``field`` name or the byte ``offset`` of the
    syntax error when known.
    """

    def __init__(self, message: str, *, field: str | None = None,
                 offset: int | None = None):
        detail = message
        if field is not None:
            detail += f" (field {field!r})"
        if offset is not None:
            detail += f" (byte offset {offset})"
        super().__init__(detail)
        self.field = field
        self.offset = offset


class AnnotationError(ValueError):
    """Annotation input or output is invalid; names the frame when known."""

    def __init__(self, message: str, *, frame: int | None = None):
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)
        self.frame = frame


class TrainingError(RuntimeError):
    """Training produced or was fed a non-finite value."""

    def __init__(self, message: str, *, step: int | None = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


# ---------------------------------------------------------------------------
# small shared helpers


def _as_float_array(value, name: str, *, shape: tuple[int, ...] | None = None,
                    ndim: int | None = None) -> np.ndarray:
    """Copy ``value`` into a read-only float64 array, validating shape and finiteness."""
    arr = np.array(value, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ContractError(f"{name} must have {ndim} dimension(s), got {arr.ndim}")
    if shape is not None and arr.shape != shape:
        raise ContractError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


def _check_int(value, name: str, *, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ContractError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ContractError(f"{name} must be >= {minimum}, got {value}")
    return value


def pos_of(index: int, width: int, height: int | None = None) -> tuple[int, int]:
    """Map a row-major token index to its ``(row, col)`` grid position.

    ``width`` is the number of columns. When ``height`` is given the index is
    also range-checked against the full grid.
    """
    width = _check_int(width, "width", minimum=1)
    index = _check_int(index, "index", minimum=0)
    if height is not None:
        height = _check_int(height, "height", minimum=1)
        if index >= height * width:
            raise ContractError(
                f"index {index} out of range for {height}x{width} grid")
    return (index // width, index % width)


def grid_positions(height: int, width: int) -> np.ndarray:
    """Return all ``(row, col)`` positions of an ``height x width`` grid in row-major order."""
    height = _check_int(height, "height", minimum=1)
    width = _check_int(width, "width", minimum=1)
    rows, cols = np.divmod(np.arange(height * width), width)
    return np.stack([rows, cols], axis=1).astype(np.float64)


# ---------------------------------------------------------------------------
# enums


class Strategy(Enum):
    """Pruning strategy selector."""

    HIERARCHICAL = "hierarchical"
    RANDOM_DROP = "random_drop"
    ADAPTIVE_RATIO_DROP = "adaptive_ratio_drop"
    NO_PRUNE = "no_prune"


class Phase(Enum):
    """Manipulation phase of one arm within an episode."""

    APPROACHING = "approaching"
    STARTING_OPERATION = "starting_operation"
    MOVING_WITH_OBJECT = "moving_with_object"
    RETRACTING = "retracting"


# ---------------------------------------------------------------------------
# view roles


@dataclass(frozen=True)
class ViewRoles:
    """Assignment of camera views to the head and the two wrist cameras.

    Arms are indexed 0 (left) and 1 (right) throughout the package.
    """

    head: int = 0
    left_wrist: int = 1
    right_wrist: int = 2

    def __post_init__(self):
        for name in ("head", "left_wrist", "right_wrist"):
            _check_int(getattr(self, name), name, minimum=0)
        if len({self.head, self.left_wrist, self.right_wrist}) != 3:
            raise ConfigError("view roles must be three distinct view indices")

    @property
    def wrists(self) -> tuple[int, int]:
        return (self.left_wrist, self.right_wrist)

    def wrist_for_arm(self, arm: int) -> int:
        if arm not in (0, 1):
            raise ContractError(f"arm must be 0 or 1, got {arm}")
        return self.wrists[arm]

    def to_obj(self) -> dict:
        return {"head": self.head, "left_wrist": self.left_wrist,
                "right_wrist": self.right_wrist}

    @classmethod
    def from_obj(cls, obj) -> "ViewRoles":
        if not isinstance(obj, dict):
            raise ParseError("view roles must be an object", field="roles")
        try:
            return cls(head=obj["head"], left_wrist=obj["left_wrist"],
                       right_wrist=obj["right_wrist"])
        except KeyError as exc:
            raise ParseError("missing view role", field=str(exc.args[0])) from exc
        except (ContractError, ConfigError) as exc:
            raise ParseError(f"invalid view roles: {exc}", field="roles") from exc


# ---------------------------------------------------------------------------
# token containers


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Patch tokens of one camera view plus its summary (CLS) token.

    ``tokens`` has shape ``(height * width, embed_dim)`` in row-major patch
    order; ``cls`` has shape ``(embed_dim,)``. Arrays are stored read-only.
    """

    view_id: int
    height: int
    width: int
    embed_dim: int
    tokens: np.ndarray
    cls: np.ndarray

    def __post_init__(self):
        _check_int(self.view_id, "view_id", minimum=0)
        _check_int(self.height, "height", minimum=1)
        _check_int(self.width, "width", minimum=1)
        _check_int(self.embed_dim, "embed_dim", minimum=1)
        n = self.height * self.width
        object.__setattr__(self, "tokens", _as_float_array(
            self.tokens, "tokens", shape=(n, self.embed_dim)))
        object.__setattr__(self, "cls", _as_float_array(
            self.cls, "cls", shape=(self.embed_dim,)))

    @property
    def token_count(self) -> int:
        return self.height * self.width

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (self.view_id == other.view_id
                and self.height == other.height
                and self.width == other.width
                and self.embed_dim == other.embed_dim
                and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.cls, other.cls))

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "token_grid",
            "view_id": self.view_id,
            "height": self.height,
            "width": self.width,
            "embed_dim": self.embed_dim,
            "tokens": self.tokens.tolist(),
            "cls": self.cls.tolist(),
        }

    @classmethod
    def from_obj(cls, obj) -> "TokenGrid":
        _expect_record(obj, "token_grid")
        try:
            return cls(view_id=obj["view_id"], height=obj["height"],
                       width=obj["width"], embed_dim=obj["embed_dim"],
                       tokens=obj["tokens"], cls=obj["cls"])
        except KeyError as exc:
            raise ParseError("missing token grid field",
                             field=str(exc.args[0])) from exc
        except ContractError as exc:
            raise ParseError(f"invalid token grid: {exc}", field="tokens") from exc


@dataclass(frozen=True, eq=False)
class MultiViewObservation:
    """One timestep of synchronized camera views.

    View ids must be exactly ``0..V-1`` in order and all views must share one
    embedding width. Grid shapes may differ between views.
    """

    episode_id: str
    frame_index: int
    views: tuple[TokenGrid, ...]

    def __post_init__(self):
        if not isinstance(self.episode_id, str) or not self.episode_id:
            raise ContractError("episode_id must be a non-empty string")
        _check_int(self.frame_index, "frame_index", minimum=0)
        views = tuple(self.views)
        if not views:
            raise ContractError("observation needs at least one view")
        for i, v in enumerate(views):
            if not isinstance(v, TokenGrid):
                raise ContractError("views must be TokenGrid instances")
            if v.view_id != i:
                raise ContractError(
                    f"view ids must be 0..{len(views) - 1} in order, "
                    f"got {v.view_id} at position {i}")
            if v.embed_dim != views[0].embed_dim:
                raise ContractError("views must share one embed_dim")
        object.__setattr__(self, "views", views)

    @property
    def view_count(self) -> int:
        return len(self.views)

    @property
    def embed_dim(self) -> int:
        return self.views[0].embed_dim

    @property
    def total_tokens(self) -> int:
        return sum(v.token_count for v in self.views)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiViewObservation):
            return NotImplemented
        return (self.episode_id == other.episode_id
                and self.frame_index == other.frame_index
                and self.views == other.views)

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "observation",
            "episode_id": self.episode_id,
            "frame_index": self.frame_index,
            "views": [v.to_obj() for v in self.views],
        }

    @classmethod
    def from_obj(cls, obj) -> "MultiViewObservation":
        _expect_record(obj, "observation")
        try:
            views = tuple(TokenGrid.from_obj(v) for v in obj["views"])
            return cls(episode_id=obj["episode_id"],
                       frame_index=obj["frame_index"], views=views)
        except KeyError as exc:
            raise ParseError("missing observation field",
                             field=str(exc.args[0])) from exc
        except ContractError as exc:
            raise ParseError(f"invalid observation: {exc}", field="views") from exc


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    """Predictor outputs for one observation.

    ``intra_raw`` and ``intra_weighted`` hold one array per view aligned with
    that view's row-major token order; ``inter`` holds one weight per view.
    Raw and inter scores live in ``[0, 1]``; weighted scores are nonnegative.
    """

    intra_raw: tuple[np.ndarray, ...]
    intra_weighted: tuple[np.ndarray, ...]
    inter: np.ndarray

    def __post_init__(self):
        raw = tuple(_as_float_array(a, "intra_raw", ndim=1) for a in self.intra_raw)
        weighted = tuple(_as_float_array(a, "intra_weighted", ndim=1)
                         for a in self.intra_weighted)
        if len(raw) != len(weighted):
            raise ContractError("intra_raw and intra_weighted must align per view")
        for a, b in zip(raw, weighted):
            if a.shape != b.shape:
                raise ContractError("intra_raw and intra_weighted must align per view")
        for a in raw:
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise ContractError("intra_raw scores must lie in [0, 1]")
        for b in weighted:
            if b.size and b.min() < 0.0:
                raise ContractError("intra_weighted scores must be nonnegative")
        inter = _as_float_array(self.inter, "inter", shape=(len(raw),))
        if inter.size and (inter.min() < 0.0 or inter.max() > 1.0):
            raise ContractError("inter scores must lie in [0, 1]")
        object.__setattr__(self, "intra_raw", raw)
        object.__setattr__(self, "intra_weighted", weighted)
        object.__setattr__(self, "inter", inter)

    def check_shapes(self, obs: MultiViewObservation) -> None:
        """Raise unless these scores are shaped for ``obs``."""
        if len(self.intra_raw) != obs.view_count:
            raise ContractError("score view count does not match observation")
        for arr, view in zip(self.intra_raw, obs.views):
            if arr.shape != (view.token_count,):
                raise ContractError(
                    f"view {view.view_id} has {view.token_count} tokens, "
                    f"scores have {arr.shape[0]}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImportanceScores):
            return NotImplemented
        return (len(self.intra_raw) == len(other.intra_raw)
                and all(np.array_equal(a, b) for a, b in
                        zip(self.intra_raw, other.intra_raw))
                and all(np.array_equal(a, b) for a, b in
                        zip(self.intra_weighted, other.intra_weighted))
                and np.array_equal(self.inter, other.inter))

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "scores",
            "intra_raw": [a.tolist() for a in self.intra_raw],
            "intra_weighted": [a.tolist() for a in self.intra_weighted],
            "inter": self.inter.tolist(),
        }

    @classmethod
    def from_obj(cls, obj) -> "ImportanceScores":
        _expect_record(obj, "scores")
        try:
            return cls(intra_raw=tuple(obj["intra_raw"]),
                       intra_weighted=tuple(obj["intra_weighted"]),
                       inter=obj["inter"])
        except KeyError as exc:
            raise ParseError("missing scores field", field=str(exc.args[0])) from exc
        except ContractError as exc:
            raise ParseError(f"invalid scores: {exc}", field="intra_raw") from exc


# ---------------------------------------------------------------------------
# pruning configuration and result


@dataclass(frozen=True)
class PruneConfig:
    """Knobs of the pruning pipeline.

    ``alphas`` holds the per-view local prune ratio, ``beta`` the global one;
    both count ratios of tokens to drop, so they live in ``[0, 1)``.
    ``epsilon`` stabilizes the reciprocal-distance weighting and must be
    positive. ``adaptive_threshold`` and ``adaptive_multiplier`` parameterize
    the adaptive-ratio baseline; ``seed`` drives the random baseline.
    """

    alphas: tuple[float, ...] = (0.3, 0.2, 0.2)
    beta: float = 0.5
    epsilon: float = 0.01
    strategy: Strategy = Strategy.HIERARCHICAL
    adaptive_threshold: float = 0.5
    adaptive_multiplier: float = 0.8
    seed: int = 0

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas:
            raise ConfigError("alphas must name at least one view")
        for a in alphas:
            if not math.isfinite(a) or not 0.0 <= a < 1.0:
                raise ConfigError(f"local prune ratio must lie in [0, 1), got {a}")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "adaptive_threshold", float(self.adaptive_threshold))
        object.__setattr__(self, "adaptive_multiplier", float(self.adaptive_multiplier))
        if not math.isfinite(self.beta) or not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"global prune ratio must lie in [0, 1), got {self.beta}")
        if not math.isfinite(self.epsilon) or self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not isinstance(self.strategy, Strategy):
            raise ConfigError(f"unknown strategy: {self.strategy!r}")
        if not math.isfinite(self.adaptive_threshold):
            raise ConfigError("adaptive_threshold must be finite")
        if not math.isfinite(self.adaptive_multiplier) or self.adaptive_multiplier < 0.0:
            raise ConfigError("adaptive_multiplier must be nonnegative")
        _check_int(self.seed, "seed", minimum=0)

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "prune_config",
            "alphas": list(self.alphas),
            "beta": self.beta,
            "epsilon": self.epsilon,
            "strategy": self.strategy.value,
            "adaptive_threshold": self.adaptive_threshold,
            "adaptive_multiplier": self.adaptive_multiplier,
            "seed": self.seed,
        }

    @classmethod
    def from_obj(cls, obj) -> "PruneConfig":
        _expect_record(obj, "prune_config")
        try:
            strategy = Strategy(obj["strategy"])
        except KeyError as exc:
            raise ParseError("missing prune config field",
                             field=str(exc.args[0])) from exc
        except ValueError as exc:
            raise ParseError(f"unknown strategy {obj.get('strategy')!r}",
                             field="strategy") from exc
        try:
            return cls(alphas=tuple(obj["alphas"]), beta=obj["beta"],
                       epsilon=obj["epsilon"], strategy=strategy,
                       adaptive_threshold=obj.get("adaptive_threshold", 0.5),
                       adaptive_multiplier=obj.get("adaptive_multiplier", 0.8),
                       seed=obj.get("seed", 0))
        except KeyError as exc:
            raise ParseError("missing prune config field",
                             field=str(exc.args[0])) from exc
        except (ConfigError, ContractError) as exc:
            raise ParseError(f"invalid prune config: {exc}",
                             field="prune_config") from exc


@dataclass(frozen=True, eq=False)
class PruneResult:
    """Outcome of pruning one observation.

    ``kept`` lists surviving token indices per view, strictly increasing;
    ``fused_scores`` aligns with ``kept`` entry by entry. ``ranking`` orders
    every kept token best-first as ``(view, index)`` pairs and is the reverse
    of the pruning order, so it is fully deterministic under ties.
    ``view_token_counts`` records the pre-prune token count per view.
    """

    view_token_counts: tuple[int, ...]
    kept: tuple[tuple[int, ...], ...]
    fused_scores: tuple[np.ndarray, ...]
    local_pruned_counts: tuple[int, ...]
    global_pruned_count: int
    ranking: tuple[tuple[int, int], ...]

    def __post_init__(self):
        counts = tuple(_check_int(c, "view_token_counts", minimum=0)
                       for c in self.view_token_counts)
        kept = tuple(tuple(int(i) for i in idx) for idx in self.kept)
        fused = tuple(_as_float_array(a, "fused_scores", ndim=1)
                      for a in self.fused_scores)
        local = tuple(_check_int(c, "local_pruned_counts", minimum=0)
                      for c in self.local_pruned_counts)
        global_count = _check_int(self.global_pruned_count,
                                  "global_pruned_count", minimum=0)
        if not len(counts) == len(kept) == len(fused) == len(local):
            raise ContractError("per-view fields must have one entry per view")
        for v, (idx, scores, n, pruned) in enumerate(
                zip(kept, fused, counts, local)):
            if len(idx) != scores.shape[0]:
                raise ContractError(f"view {v}: kept and fused_scores must align")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ContractError(f"view {v}: kept indices must be strictly increasing")
            if idx and (idx[0] < 0 or idx[-1] >= n):
                raise ContractError(f"view {v}: kept index out of range")
            if pruned > n:
                raise ContractError(f"view {v}: pruned more tokens than exist")
        survivors = sum(c - p for c, p in zip(counts, local))
        if sum(len(i) for i in kept) != survivors - global_count:
            raise ContractError(
                "kept count must equal post-local survivors minus global prunes")
        ranking = tuple((int(v), int(i)) for v, i in self.ranking)
        if sorted(ranking) != sorted((v, i) for v, idx in enumerate(kept)
                                     for i in idx):
            raise ContractError("ranking must enumerate exactly the kept tokens")
        object.__setattr__(self, "view_token_counts", counts)
        object.__setattr__(self, "kept", kept)
        object.__setattr__(self, "fused_scores", fused)
        object.__setattr__(self, "local_pruned_counts", local)
        object.__setattr__(self, "global_pruned_count", global_count)
        object.__setattr__(self, "ranking", ranking)

    @property
    def kept_total(self) -> int:
        return sum(len(idx) for idx in self.kept)

    @property
    def kept_per_view(self) -> tuple[int, ...]:
        return tuple(len(idx) for idx in self.kept)

    @property
    def post_local_counts(self) -> tuple[int, ...]:
        return tuple(n - p for n, p in
                     zip(self.view_token_counts, self.local_pruned_counts))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PruneResult):
            return NotImplemented
        return (self.view_token_counts == other.view_token_counts
                and self.kept == other.kept
                and all(np.array_equal(a, b) for a, b in
                        zip(self.fused_scores, other.fused_scores))
                and self.local_pruned_counts == other.local_pruned_counts
                and self.global_pruned_count == other.global_pruned_count
                and self.ranking == other.ranking)

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "prune_result",
            "view_token_counts": list(self.view_token_counts),
            "kept": [list(idx) for idx in self.kept],
            "fused_scores": [a.tolist() for a in self.fused_scores],
            "local_pruned_counts": list(self.local_pruned_counts),
            "global_pruned_count": self.global_pruned_count,
            "ranking": [list(pair) for pair in self.ranking],
        }

    @classmethod
    def from_obj(cls, obj) -> "PruneResult":
        _expect_record(obj, "prune_result")
        try:
            return cls(
                view_token_counts=tuple(obj["view_token_counts"]),
                kept=tuple(tuple(idx) for idx in obj["kept"]),
                fused_scores=tuple(obj["fused_scores"]),
                local_pruned_counts=tuple(obj["local_pruned_counts"]),
                global_pruned_count=obj["global_pruned_count"],
                ranking=tuple(tuple(pair) for pair in obj["ranking"]),
            )
        except KeyError as exc:
            raise ParseError("missing prune result field",
                             field=str(exc.args[0])) from exc
        except ContractError as exc:
            raise ParseError(f"invalid prune result: {exc}", field="kept") from exc


# ---------------------------------------------------------------------------
# episode annotation


@dataclass(frozen=True, eq=False)
class FrameAnnotation:
    """Per-frame labels: one patch mask per view, one relevance label per view,
    one phase per arm."""

    masks: tuple[np.ndarray, ...]
    inter_labels: tuple[int, ...]
    arm_phases: tuple[Phase, ...]

    def __post_init__(self):
        masks = []
        for m in self.masks:
            arr = np.array(m, dtype=np.uint8)
            if arr.ndim != 1:
                raise ContractError("masks must be flat per-view arrays")
            src = np.asarray(m)
            if src.size and not np.isin(src, (0, 1)).all():
                raise ContractError("mask entries must be 0 or 1")
            arr.flags.writeable = False
            masks.append(arr)
        labels = tuple(int(x) for x in self.inter_labels)
        if len(labels) != len(masks):
            raise ContractError("inter_labels must have one entry per view")
        if any(x not in (0, 1) for x in labels):
            raise ContractError("inter_labels must be 0 or 1")
        phases = tuple(self.arm_phases)
        if any(not isinstance(p, Phase) for p in phases):
            raise ContractError("arm_phases must be Phase values")
        object.__setattr__(self, "masks", tuple(masks))
        object.__setattr__(self, "inter_labels", labels)
        object.__setattr__(self, "arm_phases", phases)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameAnnotation):
            return NotImplemented
        return (len(self.masks) == len(other.masks)
                and all(np.array_equal(a, b) for a, b in
                        zip(self.masks, other.masks))
                and self.inter_labels == other.inter_labels
                and self.arm_phases == other.arm_phases)


@dataclass(frozen=True, eq=False)
class EpisodeAnnotation:
    """Token-level and view-level labels for one episode.

    ``grids`` fixes the per-view patch grid shape for the whole episode;
    every frame's masks must match it, and the head view's relevance label
    must be 1 in every frame.
    """

    episode_id: str
    roles: ViewRoles
    grids: tuple[tuple[int, int], ...]
    frames: tuple[FrameAnnotation, ...]

    def __post_init__(self):
        if not isinstance(self.episode_id, str) or not self.episode_id:
            raise ContractError("episode_id must be a non-empty string")
        if not isinstance(self.roles, ViewRoles):
            raise ContractError("roles must be a ViewRoles")
        grids = tuple((int(h), int(w)) for h, w in self.grids)
        for h, w in grids:
            if h < 1 or w < 1:
                raise ContractError("grid shapes must be positive")
        needed = max(self.roles.head, *self.roles.wrists) + 1
        frames = tuple(self.frames)
        if (frames or grids) and len(grids) < needed:
            raise ContractError("grids must cover every role view")
        for t, frame in enumerate(frames):
            if not isinstance(frame, FrameAnnotation):
                raise ContractError("frames must be FrameAnnotation instances")
            if len(frame.masks) != len(grids):
                raise AnnotationError("mask count does not match view count",
                                      frame=t)
            for v, (mask, (h, w)) in enumerate(zip(frame.masks, grids)):
                if mask.shape != (h * w,):
                    raise AnnotationError(
                        f"view {v} mask has {mask.shape[0]} entries, "
                        f"grid is {h}x{w}", frame=t)
            if frame.inter_labels[self.roles.head] != 1:
                raise AnnotationError("head view label must be 1", frame=t)
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "frames", frames)

    @property
    def length(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeAnnotation):
            return NotImplemented
        return (self.episode_id == other.episode_id
                and self.roles == other.roles
                and self.grids == other.grids
                and self.frames == other.frames)

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "episode_annotation",
            "episode_id": self.episode_id,
            "roles": self.roles.to_obj(),
            "grids": [list(g) for g in self.grids],
            "frames": [
                {
                    "masks": [m.tolist() for m in f.masks],
                    "inter_labels": list(f.inter_labels),
                    "arm_phases": [p.value for p in f.arm_phases],
                }
                for f in self.frames
            ],
        }

    @classmethod
    def from_obj(cls, obj) -> "EpisodeAnnotation":
        _expect_record(obj, "episode_annotation")
        try:
            frames = tuple(_frame_from_obj(f) for f in obj["frames"])
            return cls(episode_id=obj["episode_id"],
                       roles=ViewRoles.from_obj(obj["roles"]),
                       grids=tuple(tuple(g) for g in obj["grids"]),
                       frames=frames)
        except KeyError as exc:
            raise ParseError("missing annotation field",
                             field=str(exc.args[0])) from exc
        except (ContractError, AnnotationError) as exc:
            raise ParseError(f"invalid annotation: {exc}", field="frames") from exc

    def frame_objs(self) -> Iterator[dict]:
        """Yield one flat record per frame for line-oriented storage."""
        for t, f in enumerate(self.frames):
            yield {
                "fmt": FORMAT_VERSION,
                "kind": "annotation",
                "episode_id": self.episode_id,
                "frame_index": t,
                "roles": self.roles.to_obj(),
                "grids": [list(g) for g in self.grids],
                "masks": [m.tolist() for m in f.masks],
                "inter_labels": list(f.inter_labels),
                "arm_phases": [p.value for p in f.arm_phases],
            }

    @classmethod
    def from_frame_objs(cls, objs: Iterable[dict]) -> "EpisodeAnnotation":
        """Reassemble an episode from per-frame records, validating consistency."""
        objs = list(objs)
        if not objs:
            raise ParseError("no annotation records", field="frames")
        frames = []
        episode_id = None
        roles = None
        grids = None
        for obj in objs:
            _expect_record(obj, "annotation")
            try:
                if episode_id is None:
                    episode_id = obj["episode_id"]
                    roles = ViewRoles.from_obj(obj["roles"])
                    grids = tuple(tuple(g) for g in obj["grids"])
                elif obj["episode_id"] != episode_id:
                    raise ParseError(
                        f"mixed episodes: {obj['episode_id']!r} vs {episode_id!r}",
                        field="episode_id")
                if obj["frame_index"] != len(frames):
                    raise ParseError(
                        f"expected frame {len(frames)}, got {obj['frame_index']}",
                        field="frame_index")
                frames.append(_frame_from_obj(obj))
            except KeyError as exc:
                raise ParseError("missing annotation field",
                                 field=str(exc.args[0])) from exc
        try:
            return cls(episode_id=episode_id, roles=roles, grids=grids,
                       frames=tuple(frames))
        except (ContractError, AnnotationError) as exc:
            raise ParseError(f"invalid annotation: {exc}", field="frames") from exc


def _frame_from_obj(obj) -> FrameAnnotation:
    try:
        phases = tuple(Phase(p) for p in obj["arm_phases"])
    except ValueError as exc:
        raise ParseError(f"unknown phase: {exc}", field="arm_phases") from exc
    except KeyError as exc:
        raise ParseError("missing annotation field", field=str(exc.args[0])) from exc
    try:
        return FrameAnnotation(masks=tuple(obj["masks"]),
                               inter_labels=tuple(obj["inter_labels"]),
                               arm_phases=phases)
    except KeyError as exc:
        raise ParseError("missing annotation field", field=str(exc.args[0])) from exc
    except ContractError as exc:
        raise ParseError(f"invalid frame annotation: {exc}", field="masks") from exc


# ---------------------------------------------------------------------------
# generic record serialization


_KINDS = {}


def _register_kinds():
    _KINDS.update({
        "token_grid": TokenGrid,
        "observation": MultiViewObservation,
        "scores": ImportanceScores,
        "prune_config": PruneConfig,
        "prune_result": PruneResult,
        "episode_annotation": EpisodeAnnotation,
    })


def _expect_record(obj, kind: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"{kind} record must be a JSON object")
    if obj.get("fmt") != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {obj.get('fmt')!r}",
                         field="fmt")
    if obj.get("kind") != kind:
        raise ParseError(f"expected kind {kind!r}, got {obj.get('kind')!r}",
                         field="kind")


def dumps_obj(obj: dict) -> str:
    """Serialize one record object to compact single-line JSON."""
    text = json.dumps(obj, separators=(",", ":"), allow_nan=False)
    if "\n" in text:
        raise ContractError("record serialization must be single-line")
    return text


def loads_obj(text: str) -> dict:
    """Parse one JSON record, reporting the byte offset of syntax errors."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object")
    return obj


def serialize(value) -> bytes:
    """Serialize any core value to canonical JSON bytes."""
    if not hasattr(value, "to_obj"):
        raise ContractError(f"cannot serialize {type(value).__name__}")
    return dumps_obj(value.to_obj()).encode("utf-8")


def deserialize(data: bytes | str):
    """Parse canonical JSON bytes back into the core value they encode."""
    if not _KINDS:
        _register_kinds()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    obj = loads_obj(data)
    kind = obj.get("kind")
    cls = _KINDS.get(kind)
    if cls is None:
        raise ParseError(f"unknown record kind {kind!r}", field="kind")
    return cls.from_obj(obj)


# ---------------------------------------------------------------------------
# line-oriented files


def write_jsonl(path, objs: Iterable[dict]) -> None:
    """Write record objects one per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(dumps_obj(obj))
            fh.write("\n")


def read_jsonl(path) -> Iterator[dict]:
    """Yield record objects one per line, reporting the line on parse errors."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield loads_obj(line)
            except ParseError as exc:
                raise ParseError(f"{path}, line {lineno}: {exc}",
                                 field=exc.field, offset=exc.offset) from exc


def save_observations(path, observations: Iterable[MultiViewObservation]) -> None:
    write_jsonl(path, (obs.to_obj() for obs in observations))


def load_observations(path) -> list[MultiViewObservation]:
    return [MultiViewObservation.from_obj(obj) for obj in read_jsonl(path)]


def save_annotation(path, annotation: EpisodeAnnotation) -> None:
    write_jsonl(path, annotation.frame_objs())


def load_annotation(path) -> EpisodeAnnotation:
    return EpisodeAnnotation.from_frame_objs(read_jsonl(path))
