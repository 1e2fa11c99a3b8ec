"""Hierarchical token pruning: spatial weighting, local and global stages,
baseline strategies, and a transformer cost model.

The hierarchical pipeline runs per observation:

1. spatially smooth each view's raw token scores with reciprocal-distance
   weighting,
2. min-max normalize the weighted scores within each view,
3. locally drop the lowest-scored fraction of each view,
4. fuse each survivor's normalized score with its view's relevance weight,
5. globally drop the lowest-fused fraction across all views.

Every stage breaks score ties by token position: within a view the lower
index loses first, across views the lower ``(view, index)`` pair loses
first. That makes all outputs reproducible down to the byte.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    FORMAT_VERSION,
    ConfigError,
    ContractError,
    ImportanceScores,
    MultiViewObservation,
    ParseError,
    PruneConfig,
    PruneResult,
    Strategy,
    _as_float_array,
    _check_int,
    _expect_record,
    grid_positions,
)
from .predictor import MlpParams, predict_inter, predict_intra

# count tolerance keeps decimal ratios exact: 0.29 * 100 floors to 29, not 28
_COUNT_TOLERANCE = 1e-9

_weight_matrices: dict[tuple[int, int, float], np.ndarray] = {}
_weight_lock = threading.Lock()


def _prune_count(ratio: float, n: int) -> int:
    """Number of tokens to drop out of ``n`` at ``ratio``: floor(ratio * n)."""
    return int(math.floor(ratio * n + _COUNT_TOLERANCE))


def _weight_matrix(height: int, width: int, epsilon: float) -> np.ndarray:
    """Reciprocal-distance weight matrix of a grid, cached per shape."""
    key = (height, width, epsilon)
    with _weight_lock:
        cached = _weight_matrices.get(key)
    if cached is not None:
        return cached
    pos = grid_positions(height, width)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    matrix = 1.0 / (dist + epsilon)
    matrix.flags.writeable = False
    with _weight_lock:
        _weight_matrices.setdefault(key, matrix)
    return matrix


def adaptive_weight(raw_scores, height: int, width: int,
                    epsilon: float = 0.01) -> np.ndarray:
    """Spatially smooth raw token scores over their patch grid.

    Each output is the sum of every raw score divided by its Euclidean grid
    distance to the target patch plus ``epsilon``; the token's own score
    enters at distance zero, so it contributes ``raw / epsilon``.
    """
    if not math.isfinite(epsilon) or epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    height = _check_int(height, "height", minimum=1)
    width = _check_int(width, "width", minimum=1)
    raw = _as_float_array(raw_scores, "raw_scores", shape=(height * width,))
    return _weight_matrix(height, width, float(epsilon)) @ raw


def adaptive_weight_at(raw_scores, positions, epsilon: float = 0.01) -> np.ndarray:
    """Reciprocal-distance weighting over explicit token positions.

    Same contract as ``adaptive_weight`` but for tokens at arbitrary
    coordinates instead of a dense grid.
    """
    if not math.isfinite(epsilon) or epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    pos = _as_float_array(positions, "positions", ndim=2)
    raw = _as_float_array(raw_scores, "raw_scores", shape=(pos.shape[0],))
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    return (1.0 / (dist + epsilon)) @ raw


def normalize_scores(scores) -> np.ndarray:
    """Min-max normalize one view's scores into [0, 1].

    A constant score vector normalizes to all ones, so a uniformly scored
    view is not accidentally wiped out by the local stage.
    """
    arr = _as_float_array(scores, "scores", ndim=1)
    if arr.size == 0:
        return arr
    low, high = arr.min(), arr.max()
    if high == low:
        return np.ones_like(arr)
    return (arr - low) / (high - low)


def _drop_lowest(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices surviving after dropping ``count`` lowest scores, ascending.

    Ties drop the lower index first.
    """
    n = scores.shape[0]
    if count > n:
        raise ContractError(f"cannot drop {count} of {n} tokens")
    order = np.lexsort((np.arange(n), scores))
    return np.sort(order[count:])


def local_prune(normalized_per_view: Sequence[np.ndarray],
                alphas: Sequence[float]
                ) -> tuple[tuple[np.ndarray, ...], tuple[int, ...]]:
    """Drop the lowest-scored ``floor(alpha * N)`` tokens of each view.

    Returns the surviving indices per view (ascending) and the per-view
    dropped counts.
    """
    if len(alphas) != len(normalized_per_view):
        raise ContractError(
            f"need one local ratio per view: {len(alphas)} ratios, "
            f"{len(normalized_per_view)} views")
    kept, counts = [], []
    for scores, alpha in zip(normalized_per_view, alphas):
        arr = _as_float_array(scores, "scores", ndim=1)
        count = _prune_count(float(alpha), arr.shape[0])
        kept.append(_drop_lowest(arr, count))
        counts.append(count)
    return tuple(kept), tuple(counts)


def fuse_scores(normalized_per_view: Sequence[np.ndarray],
                inter_weights) -> tuple[np.ndarray, ...]:
    """Multiply each view's normalized token scores by its view weight."""
    inter = _as_float_array(inter_weights, "inter_weights",
                            shape=(len(normalized_per_view),))
    return tuple(_as_float_array(s, "scores", ndim=1) * w
                 for s, w in zip(normalized_per_view, inter))


def _global_by_count(fused_per_view: Sequence[np.ndarray],
                     kept_per_view: Sequence[np.ndarray],
                     drop_count: int,
                     view_token_counts: Sequence[int],
                     local_pruned_counts: Sequence[int]) -> PruneResult:
    """Drop the ``drop_count`` lowest fused survivors across views."""
    score_all = np.concatenate([np.asarray(s, dtype=np.float64)
                                for s in fused_per_view]) \
        if fused_per_view else np.zeros(0)
    view_all = np.concatenate([np.full(len(k), v, dtype=np.int64)
                               for v, k in enumerate(kept_per_view)]) \
        if kept_per_view else np.zeros(0, dtype=np.int64)
    idx_all = np.concatenate([np.asarray(k, dtype=np.int64)
                              for k in kept_per_view]) \
        if kept_per_view else np.zeros(0, dtype=np.int64)
    if not score_all.shape == view_all.shape == idx_all.shape:
        raise ContractError("fused scores must align with survivor indices")
    total = score_all.shape[0]
    if drop_count > total:
        raise ContractError(f"cannot drop {drop_count} of {total} survivors")
    order = np.lexsort((idx_all, view_all, score_all))
    kept_order = order[drop_count:]
    ranking = tuple((int(view_all[i]), int(idx_all[i]))
                    for i in reversed(kept_order))
    kept, fused = [], []
    for v in range(len(kept_per_view)):
        sel = kept_order[view_all[kept_order] == v]
        by_idx = sel[np.argsort(idx_all[sel], kind="stable")]
        kept.append(tuple(int(i) for i in idx_all[by_idx]))
        fused.append(score_all[by_idx])
    return PruneResult(
        view_token_counts=tuple(int(n) for n in view_token_counts),
        kept=tuple(kept),
        fused_scores=tuple(fused),
        local_pruned_counts=tuple(int(c) for c in local_pruned_counts),
        global_pruned_count=int(drop_count),
        ranking=ranking,
    )


def global_prune(fused_per_view: Sequence[np.ndarray],
                 kept_per_view: Sequence[np.ndarray],
                 beta: float,
                 view_token_counts: Sequence[int],
                 local_pruned_counts: Sequence[int]) -> PruneResult:
    """Drop the lowest-fused ``floor(beta * M)`` survivors across all views."""
    total = sum(len(k) for k in kept_per_view)
    return _global_by_count(fused_per_view, kept_per_view,
                            _prune_count(float(beta), total),
                            view_token_counts, local_pruned_counts)


def _prune_weighted(weighted_per_view: Sequence[np.ndarray],
                    inter_weights, alphas: Sequence[float], beta: float
                    ) -> PruneResult:
    normalized = [normalize_scores(s) for s in weighted_per_view]
    kept_local, local_counts = local_prune(normalized, alphas)
    fused = fuse_scores([n[k] for n, k in zip(normalized, kept_local)],
                        inter_weights)
    counts = [s.shape[0] for s in weighted_per_view]
    return global_prune(fused, kept_local, beta, counts, local_counts)


def _adaptive_from_weighted(weighted_per_view: Sequence[np.ndarray],
                            inter_weights, config: PruneConfig) -> PruneResult:
    threshold = config.adaptive_threshold
    multiplier = config.adaptive_multiplier
    normalized = [normalize_scores(s) for s in weighted_per_view]
    kept_local, local_counts = [], []
    for scores in normalized:
        below = int((scores < threshold).sum())
        count = min(_prune_count(multiplier, below), scores.shape[0])
        kept_local.append(_drop_lowest(scores, count))
        local_counts.append(count)
    fused = fuse_scores([n[k] for n, k in zip(normalized, kept_local)],
                        inter_weights)
    flat = np.concatenate(fused) if fused else np.zeros(0)
    below = int((flat < threshold).sum())
    drop = min(_prune_count(multiplier, below), flat.shape[0])
    counts = [s.shape[0] for s in weighted_per_view]
    return _global_by_count(fused, kept_local, drop, counts, local_counts)


def hierarchical_prune(raw_scores: Sequence[np.ndarray], inter_weights,
                       grid_shapes: Sequence[tuple[int, int]],
                       config: PruneConfig) -> PruneResult:
    """Run the score-driven pipeline on explicit raw scores and view weights.

    ``grid_shapes`` gives each view's ``(height, width)``; raw score arrays
    must match those grids. Honors the hierarchical, no-prune, and
    adaptive-ratio strategies; the random baseline does not look at scores
    and lives in ``random_drop``.
    """
    if len(raw_scores) != len(grid_shapes):
        raise ContractError("need one grid shape per score array")
    weighted = [adaptive_weight(raw, h, w, config.epsilon)
                for raw, (h, w) in zip(raw_scores, grid_shapes)]
    if config.strategy is Strategy.HIERARCHICAL:
        if len(config.alphas) != len(raw_scores):
            raise ContractError(
                f"config names {len(config.alphas)} views, "
                f"scores have {len(raw_scores)}")
        return _prune_weighted(weighted, inter_weights, config.alphas,
                               config.beta)
    if config.strategy is Strategy.NO_PRUNE:
        zeros = (0.0,) * len(raw_scores)
        return _prune_weighted(weighted, inter_weights, zeros, 0.0)
    if config.strategy is Strategy.ADAPTIVE_RATIO_DROP:
        return _adaptive_from_weighted(weighted, inter_weights, config)
    raise ContractError(
        f"strategy {config.strategy.value} does not consume scores")


def random_drop(view_token_counts: Sequence[int],
                config: PruneConfig) -> PruneResult:
    """Score-free baseline: drop uniformly at random in both stages.

    Stage one drops ``floor(alpha * N)`` random tokens per view; stage two
    draws fresh priorities for the survivors and drops ``floor(beta * M)``
    of them, so the global stage is uniform across views. The stage-two
    priorities stand in for fused scores in the result. Fully determined
    by ``config.seed``.
    """
    counts = [_check_int(n, "view_token_counts", minimum=0)
              for n in view_token_counts]
    if len(config.alphas) != len(counts):
        raise ContractError(
            f"config names {len(config.alphas)} views, got {len(counts)}")
    rng = np.random.default_rng(config.seed)
    kept_local, local_counts = [], []
    for n, alpha in zip(counts, config.alphas):
        priorities = rng.random(n)
        count = _prune_count(alpha, n)
        kept_local.append(_drop_lowest(priorities, count))
        local_counts.append(count)
    survivors = sum(len(k) for k in kept_local)
    fresh = rng.random(survivors)
    fused, offset = [], 0
    for k in kept_local:
        fused.append(fresh[offset:offset + len(k)])
        offset += len(k)
    drop = _prune_count(config.beta, survivors)
    return _global_by_count(fused, kept_local, drop, counts, local_counts)


def prune_observation(obs: MultiViewObservation, intra_params: MlpParams,
                      inter_params: MlpParams, config: PruneConfig
                      ) -> tuple[ImportanceScores, PruneResult]:
    """Score an observation with both predictors and prune it.

    Returns the predictor outputs alongside the prune result so callers can
    audit or evaluate the scores without a second forward pass.
    """
    raw = predict_intra(intra_params, obs)
    inter = predict_inter(inter_params, obs)
    shapes = [(v.height, v.width) for v in obs.views]
    weighted = tuple(adaptive_weight(r, h, w, config.epsilon)
                     for r, (h, w) in zip(raw, shapes))
    scores = ImportanceScores(intra_raw=raw, intra_weighted=weighted,
                              inter=inter)
    if config.strategy is Strategy.RANDOM_DROP:
        result = random_drop([v.token_count for v in obs.views], config)
    elif config.strategy is Strategy.HIERARCHICAL:
        if len(config.alphas) != obs.view_count:
            raise ContractError(
                f"config names {len(config.alphas)} views, "
                f"observation has {obs.view_count}")
        result = _prune_weighted(weighted, inter, config.alphas, config.beta)
    elif config.strategy is Strategy.NO_PRUNE:
        zeros = (0.0,) * obs.view_count
        result = _prune_weighted(weighted, inter, zeros, 0.0)
    else:
        result = _adaptive_from_weighted(weighted, inter, config)
    return scores, result


def no_prune_config(config: PruneConfig) -> PruneConfig:
    """Copy of ``config`` that keeps every token."""
    return replace(config, strategy=Strategy.NO_PRUNE)


# ---------------------------------------------------------------------------
# transformer cost model


@dataclass(frozen=True)
class FlopModel:
    """Prefill cost model of a decoder-style transformer.

    Per layer a sequence of ``n`` tokens costs
    ``linear_coeff * n * d^2 + quadratic_coeff * n^2 * d`` floating point
    operations, covering the parameter matmuls and the attention score and
    mixing products respectively.
    """

    layers: int = 18
    embed_dim: int = 2048
    linear_coeff: float = 12.0
    quadratic_coeff: float = 2.0

    def __post_init__(self):
        _check_int(self.layers, "layers", minimum=1)
        _check_int(self.embed_dim, "embed_dim", minimum=1)
        object.__setattr__(self, "linear_coeff", float(self.linear_coeff))
        object.__setattr__(self, "quadratic_coeff", float(self.quadratic_coeff))
        for name in ("linear_coeff", "quadratic_coeff"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise ConfigError(f"{name} must be positive, got {value}")

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "flop_model",
            "layers": self.layers,
            "embed_dim": self.embed_dim,
            "linear_coeff": self.linear_coeff,
            "quadratic_coeff": self.quadratic_coeff,
        }

    @classmethod
    def from_obj(cls, obj) -> "FlopModel":
        _expect_record(obj, "flop_model")
        try:
            return cls(layers=obj["layers"], embed_dim=obj["embed_dim"],
                       linear_coeff=obj.get("linear_coeff", 12.0),
                       quadratic_coeff=obj.get("quadratic_coeff", 2.0))
        except KeyError as exc:
            raise ParseError("missing flop model field",
                             field=str(exc.args[0])) from exc
        except (ContractError, ConfigError) as exc:
            raise ParseError(f"invalid flop model: {exc}",
                             field="flop_model") from exc


def flop_estimate(model: FlopModel, token_count: int) -> float:
    """Estimated prefill cost of one forward pass over ``token_count`` tokens."""
    n = _check_int(token_count, "token_count", minimum=0)
    d = model.embed_dim
    return model.layers * (model.linear_coeff * n * d * d
                           + model.quadratic_coeff * n * n * d)


def speedup_estimate(model: FlopModel, tokens_before: int,
                     tokens_after: int) -> float:
    """Cost ratio of running on the full versus the pruned sequence."""
    before = _check_int(tokens_before, "tokens_before", minimum=1)
    after = _check_int(tokens_after, "tokens_after", minimum=1)
    return flop_estimate(model, before) / flop_estimate(model, after)
