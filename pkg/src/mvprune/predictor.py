"""Importance predictors: small MLPs with hand-derived gradients and SGD.

Two predictors share one machinery. The token-level (intra-view) predictor
maps a single patch token to a relevance probability. The view-level
(inter-view) predictor maps the concatenated summary tokens of all views to
one probability per view. Both are tanh MLPs with a sigmoid output head
trained on binary cross-entropy.

Gradients are derived by hand and verified against central finite
differences in the test suite. The sigmoid output is clamped to
``[CLAMP, 1 - CLAMP]`` before entering the loss; gradients use the
unclamped expression, so the clamp only guards the loss value against
``log(0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    FORMAT_VERSION,
    ConfigError,
    ContractError,
    MultiViewObservation,
    ParseError,
    TrainingError,
    _as_float_array,
    _check_int,
    _expect_record,
    dumps_obj,
    loads_obj,
)

CLAMP = 1e-7
DEFAULT_HIDDEN = 64


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights of one MLP as ``((W, b), ...)`` layer pairs.

    ``W`` has shape ``(fan_out, fan_in)`` and ``b`` shape ``(fan_out,)``;
    consecutive layers must chain. Hidden layers use ``activation``
    (only ``"tanh"`` is supported), the final layer a sigmoid.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        layers = []
        for i, pair in enumerate(self.layers):
            if len(pair) != 2:
                raise ContractError("each layer must be a (weight, bias) pair")
            w = _as_float_array(pair[0], f"layer {i} weight", ndim=2)
            b = _as_float_array(pair[1], f"layer {i} bias", shape=(w.shape[0],))
            if layers and w.shape[1] != layers[-1][0].shape[0]:
                raise ContractError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer "
                    f"produces {layers[-1][0].shape[0]}")
            layers.append((w, b))
        if not layers:
            raise ContractError("an MLP needs at least one layer")
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def input_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_width(self) -> int:
        return self.layers[-1][0].shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpParams):
            return NotImplemented
        return (self.activation == other.activation
                and len(self.layers) == len(other.layers)
                and all(np.array_equal(w, w2) and np.array_equal(b, b2)
                        for (w, b), (w2, b2) in zip(self.layers, other.layers)))

    def to_obj(self) -> dict:
        return {
            "fmt": FORMAT_VERSION,
            "kind": "mlp",
            "activation": self.activation,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                       for w, b in self.layers],
        }

    @classmethod
    def from_obj(cls, obj) -> "MlpParams":
        _expect_record(obj, "mlp")
        try:
            layers = tuple((layer["weight"], layer["bias"])
                           for layer in obj["layers"])
            return cls(layers=layers, activation=obj["activation"])
        except KeyError as exc:
            raise ParseError("missing mlp field", field=str(exc.args[0])) from exc
        except (ContractError, ConfigError) as exc:
            raise ParseError(f"invalid mlp: {exc}", field="layers") from exc


def init_mlp(sizes: Sequence[int], seed: int) -> MlpParams:
    """Initialize an MLP with layer widths ``sizes``.

    Weights and biases draw uniformly from ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.
    """
    sizes = [_check_int(s, "layer size", minimum=1) for s in sizes]
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least input and output widths")
    rng = np.random.default_rng(_check_int(seed, "seed", minimum=0))
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return MlpParams(layers=tuple(layers))


# ---------------------------------------------------------------------------
# forward passes


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cached(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    """Run the network and keep every layer's activation for backprop.

    Returns ``[A0, A1, ..., P]`` where ``A0`` is the input batch and ``P``
    the clamped output probabilities.
    """
    acts = [x]
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = acts[-1] @ w.T + b
        if i == last:
            acts.append(np.clip(_sigmoid(z), CLAMP, 1.0 - CLAMP))
        else:
            acts.append(np.tanh(z))
    return acts


def forward(params: MlpParams, inputs) -> np.ndarray:
    """Probabilities for a batch ``inputs`` of shape ``(B, input_width)``."""
    x = _as_float_array(inputs, "inputs", ndim=2)
    if x.shape[1] != params.input_width:
        raise ContractError(
            f"inputs have width {x.shape[1]}, network expects {params.input_width}")
    return _forward_cached(params, x)[-1]


def predict_intra(params: MlpParams, obs: MultiViewObservation
                  ) -> tuple[np.ndarray, ...]:
    """Raw token relevance scores per view, aligned with row-major token order."""
    if params.output_width != 1:
        raise ContractError("token predictor must have a single output")
    return tuple(forward(params, view.tokens)[:, 0] for view in obs.views)


def inter_features(obs: MultiViewObservation) -> np.ndarray:
    """Concatenate the per-view summary tokens into one feature vector."""
    return np.concatenate([view.cls for view in obs.views])


def predict_inter(params: MlpParams, obs: MultiViewObservation) -> np.ndarray:
    """View relevance weights for one observation, one per view."""
    feats = inter_features(obs)
    if params.input_width != feats.shape[0]:
        raise ContractError(
            f"view predictor expects {params.input_width} inputs, "
            f"observation provides {feats.shape[0]}")
    if params.output_width != obs.view_count:
        raise ContractError(
            f"view predictor has {params.output_width} outputs, "
            f"observation has {obs.view_count} views")
    return forward(params, feats[None, :])[0]


# ---------------------------------------------------------------------------
# losses and gradients


def bce(probability: float, target: float) -> float:
    """Binary cross-entropy of one prediction, with the input clamped away
    from 0 and 1."""
    p = float(probability)
    y = float(target)
    if not math.isfinite(p) or not 0.0 <= p <= 1.0:
        raise ContractError(f"probability must lie in [0, 1], got {p}")
    if y not in (0.0, 1.0):
        raise ContractError(f"target must be 0 or 1, got {y}")
    p = min(max(p, CLAMP), 1.0 - CLAMP)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def _batch(params: MlpParams, inputs, targets) -> tuple[np.ndarray, np.ndarray]:
    x = _as_float_array(inputs, "inputs", ndim=2)
    y = _as_float_array(targets, "targets", shape=(x.shape[0], params.output_width))
    if x.shape[1] != params.input_width:
        raise ContractError(
            f"inputs have width {x.shape[1]}, network expects {params.input_width}")
    if y.size == 0:
        raise ContractError("batch must contain at least one example")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("targets must be 0 or 1")
    return x, y


def loss(params: MlpParams, inputs, targets, reduction: str = "mean") -> float:
    """Cross-entropy of the network on a batch.

    ``reduction`` is ``"mean"`` (over all output elements) or ``"sum"``.
    """
    x, y = _batch(params, inputs, targets)
    _check_reduction(reduction)
    p = _forward_cached(params, x)[-1]
    values = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(values.mean() if reduction == "mean" else values.sum())


def loss_and_grad(params: MlpParams, inputs, targets, reduction: str = "mean"
                  ) -> tuple[float, tuple[tuple[np.ndarray, np.ndarray], ...]]:
    """Loss plus its gradient with respect to every weight and bias.

    The gradient structure mirrors ``params.layers``.
    """
    x, y = _batch(params, inputs, targets)
    _check_reduction(reduction)
    acts = _forward_cached(params, x)
    p = acts[-1]
    values = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    total = float(values.mean() if reduction == "mean" else values.sum())

    scale = 1.0 / values.size if reduction == "mean" else 1.0
    dz = (p - y) * scale
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        a_prev = acts[i]
        grads[i] = (dz.T @ a_prev, dz.sum(axis=0))
        if i > 0:
            da = dz @ params.layers[i][0]
            dz = da * (1.0 - acts[i] ** 2)
    return total, tuple(grads)


def _check_reduction(reduction: str) -> None:
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def loss_intra(params: MlpParams, obs: MultiViewObservation,
               masks: Sequence[np.ndarray], reduction: str = "mean") -> float:
    """Token relevance loss of one observation against per-view patch masks."""
    if len(masks) != obs.view_count:
        raise ContractError("need one mask per view")
    x = np.concatenate([view.tokens for view in obs.views], axis=0)
    y = np.concatenate([np.asarray(m, dtype=np.float64) for m in masks])
    return loss(params, x, y[:, None], reduction)


def loss_inter(params: MlpParams, obs: MultiViewObservation,
               labels: Sequence[int], reduction: str = "mean") -> float:
    """View relevance loss of one observation against per-view labels."""
    if len(labels) != obs.view_count:
        raise ContractError("need one label per view")
    x = inter_features(obs)[None, :]
    y = np.asarray(labels, dtype=np.float64)[None, :]
    return loss(params, x, y, reduction)


def total_loss(inter_loss: float, intra_loss: float, *,
               lambda_inter: float = 0.1, lambda_intra: float = 0.1,
               action_loss_hook: Callable[[], float] | None = None) -> float:
    """Combine the training objective: action term plus weighted relevance terms.

    The action term comes from ``action_loss_hook`` and defaults to 0 because
    no policy network lives in this package; the hook is the integration
    point for one.
    """
    action = 0.0
    if action_loss_hook is not None:
        action = float(action_loss_hook())
    for name, value in (("action loss", action), ("inter loss", inter_loss),
                        ("intra loss", intra_loss)):
        if not math.isfinite(value):
            raise TrainingError(f"{name} is not finite: {value}")
    return action + lambda_inter * float(inter_loss) + lambda_intra * float(intra_loss)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Plain SGD settings.

    ``batch_size`` 0 means full-batch updates; any positive value samples
    that many examples per step with replacement. ``learning_rate`` 0 is
    allowed and leaves the parameters unchanged, which is occasionally
    useful to trace the loss without updating.
    """

    learning_rate: float = 0.1
    steps: int = 1000
    batch_size: int = 64
    lambda_inter: float = 0.1
    lambda_intra: float = 0.1
    reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "learning_rate", float(self.learning_rate))
        if not math.isfinite(self.learning_rate) or self.learning_rate < 0.0:
            raise ConfigError(
                f"learning_rate must be nonnegative, got {self.learning_rate}")
        _check_int(self.steps, "steps", minimum=0)
        _check_int(self.batch_size, "batch_size", minimum=0)
        for name in ("lambda_inter", "lambda_intra"):
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            if not math.isfinite(value) or value < 0.0:
                raise ConfigError(f"{name} must be nonnegative, got {value}")
        _check_reduction(self.reduction)
        _check_int(self.seed, "seed", minimum=0)


def train(params: MlpParams, inputs, targets, config: TrainConfig
          ) -> tuple[MlpParams, np.ndarray]:
    """Train with plain SGD and return the new parameters plus the loss trace.

    The trace records each step's batch loss before that step's update.
    Raises on non-finite losses or gradients, naming the step.
    """
    x, y = _batch(params, inputs, targets)
    if x.shape[0] == 0:
        raise ContractError("training needs at least one example")
    rng = np.random.default_rng(config.seed)
    weights = [(w.copy(), b.copy()) for w, b in params.layers]
    losses = np.zeros(config.steps)
    current = params
    for step in range(config.steps):
        if config.batch_size == 0:
            bx, by = x, y
        else:
            idx = rng.integers(0, x.shape[0], size=config.batch_size)
            bx, by = x[idx], y[idx]
        value, grads = loss_and_grad(current, bx, by, config.reduction)
        if not math.isfinite(value):
            raise TrainingError(f"loss is not finite: {value}", step=step)
        losses[step] = value
        for (w, b), (dw, db) in zip(weights, grads):
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                raise TrainingError("gradient is not finite", step=step)
            with np.errstate(over="ignore"):
                w -= config.learning_rate * dw
                b -= config.learning_rate * db
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise TrainingError("parameters are not finite", step=step)
        current = MlpParams(
            layers=tuple((w, b) for w, b in weights),
            activation=params.activation)
    return current, losses


# ---------------------------------------------------------------------------
# dataset assembly


def build_intra_dataset(observations: Sequence[MultiViewObservation],
                        annotations) -> tuple[np.ndarray, np.ndarray]:
    """Stack every token of every view with its mask bit as the target.

    ``annotations`` maps episode id to its annotation (or is a single
    annotation when all observations share one episode).
    """
    xs, ys = [], []
    for obs in observations:
        ann = _annotation_for(annotations, obs)
        frame = ann.frames[obs.frame_index]
        if len(frame.masks) != obs.view_count:
            raise ContractError(
                f"episode {obs.episode_id!r} annotation covers "
                f"{len(frame.masks)} views, observation has {obs.view_count}")
        for v, (view, mask) in enumerate(zip(obs.views, frame.masks)):
            if mask.shape != (view.token_count,):
                raise ContractError(
                    f"episode {obs.episode_id!r} view {v} mask has "
                    f"{mask.shape[0]} bits, view has {view.token_count} tokens")
            xs.append(view.tokens)
            ys.append(np.asarray(mask, dtype=np.float64))
    if not xs:
        raise ContractError("no observations to build a dataset from")
    return np.concatenate(xs, axis=0), np.concatenate(ys)[:, None]


def build_inter_dataset(observations: Sequence[MultiViewObservation],
                        annotations) -> tuple[np.ndarray, np.ndarray]:
    """One example per frame: concatenated summary tokens against view labels."""
    xs, ys = [], []
    for obs in observations:
        ann = _annotation_for(annotations, obs)
        xs.append(inter_features(obs))
        ys.append(np.asarray(ann.frames[obs.frame_index].inter_labels,
                             dtype=np.float64))
    if not xs:
        raise ContractError("no observations to build a dataset from")
    return np.stack(xs), np.stack(ys)


def _annotation_for(annotations, obs: MultiViewObservation):
    ann = annotations.get(obs.episode_id) if isinstance(annotations, dict) \
        else annotations
    if ann is None or ann.episode_id != obs.episode_id:
        raise ContractError(f"no annotation for episode {obs.episode_id!r}")
    if obs.frame_index >= ann.length:
        raise ContractError(
            f"episode {obs.episode_id!r} annotation has {ann.length} frames, "
            f"observation is frame {obs.frame_index}")
    return ann


# ---------------------------------------------------------------------------
# checkpoints and traces


def save_params(path, params: MlpParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_obj(params.to_obj()))
        fh.write("\n")


def load_params(path) -> MlpParams:
    with open(path, "r", encoding="utf-8") as fh:
        return MlpParams.from_obj(loads_obj(fh.read()))


def save_trace(path, losses: np.ndarray) -> None:
    """Write the loss trace as a two-column CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in enumerate(np.asarray(losses, dtype=np.float64)):
            fh.write(f"{step},{float(value)!r}\n")


def load_trace(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "step,loss":
            raise ParseError(f"unexpected trace header {header!r}", field="header")
        values = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(f"line {lineno}: expected step,loss",
                                 field="loss")
            try:
                step, value = int(parts[0]), float(parts[1])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", field="loss") from exc
            if step != len(values):
                raise ParseError(f"line {lineno}: steps must be contiguous",
                                 field="step")
            values.append(value)
    return np.asarray(values, dtype=np.float64)
