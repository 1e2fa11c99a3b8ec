"""Importance predictors: forward passes, losses, gradients, and training."""

import math

import numpy as np
import pytest

from mvprune.core import (
    ConfigError,
    ContractError,
    ParseError,
    TrainingError,
)
from mvprune.predictor import (
    MlpParams,
    TrainConfig,
    bce,
    build_inter_dataset,
    build_intra_dataset,
    forward,
    init_mlp,
    inter_features,
    load_params,
    load_trace,
    loss,
    loss_and_grad,
    loss_inter,
    loss_intra,
    predict_inter,
    predict_intra,
    save_params,
    save_trace,
    total_loss,
    train,
)
from test_core import make_annotation, make_obs


def finite_difference_grads(params, x, y, reduction="mean", h=1e-5):
    """Central differences over every weight and bias entry."""
    grads = []
    for li, (w, b) in enumerate(params.layers):
        dw = np.zeros_like(w)
        db = np.zeros_like(b)
        for arr, out in ((w, dw), (b, db)):
            flat = out.reshape(-1)
            for k in range(arr.size):
                for sign in (+1.0, -1.0):
                    bumped = [(wi.copy(), bi.copy())
                              for wi, bi in params.layers]
                    target = bumped[li][0] if arr is w else bumped[li][1]
                    target.reshape(-1)[k] += sign * h
                    shifted = MlpParams(layers=tuple(bumped),
                                        activation=params.activation)
                    flat[k] += sign * loss(shifted, x, y, reduction)
                flat[k] /= 2.0 * h
        grads.append((dw, db))
    return grads


def relative_error(got, want):
    scale = max(abs(got), abs(want), 1e-6)
    return abs(got - want) / scale


# ---------------------------------------------------------------------------
# construction


def test_init_mlp_shapes_and_bounds():
    params = init_mlp((4, 8, 3), seed=0)
    shapes = [(w.shape, b.shape) for w, b in params.layers]
    assert shapes == [((8, 4), (8,)), ((3, 8), (3,))]
    assert params.input_width == 4
    assert params.output_width == 3
    for fan_in, (w, b) in zip((4, 8), params.layers):
        bound = 1.0 / math.sqrt(fan_in)
        assert np.abs(w).max() <= bound
        assert np.abs(b).max() <= bound


def test_init_mlp_is_deterministic():
    assert init_mlp((3, 5, 1), seed=7) == init_mlp((3, 5, 1), seed=7)
    assert init_mlp((3, 5, 1), seed=7) != init_mlp((3, 5, 1), seed=8)


def test_mlp_params_must_chain():
    w1, b1 = np.zeros((4, 3)), np.zeros(4)
    w2, b2 = np.zeros((2, 5)), np.zeros(2)
    with pytest.raises(ContractError):
        MlpParams(layers=((w1, b1), (w2, b2)))


def test_mlp_params_only_tanh():
    with pytest.raises(ConfigError):
        MlpParams(layers=((np.zeros((1, 1)), np.zeros(1)),),
                  activation="relu")


# ---------------------------------------------------------------------------
# forward


def test_forward_outputs_probabilities():
    params = init_mlp((3, 6, 2), seed=1)
    x = np.random.default_rng(0).normal(size=(10, 3))
    p = forward(params, x)
    assert p.shape == (10, 2)
    assert np.all((p > 0.0) & (p < 1.0))


def test_forward_checks_width():
    params = init_mlp((3, 2), seed=0)
    with pytest.raises(ContractError):
        forward(params, np.zeros((4, 5)))


def test_forward_extreme_logits_stay_clamped():
    w = np.full((1, 1), 1000.0)
    params = MlpParams(layers=((w, np.zeros(1)),))
    high = forward(params, np.array([[50.0]]))[0, 0]
    low = forward(params, np.array([[-50.0]]))[0, 0]
    assert 0.0 < low < high < 1.0
    assert math.isfinite(bce(high, 0.0))
    assert math.isfinite(bce(low, 1.0))


def test_predict_intra_per_view_scores():
    obs = make_obs(view_count=2)
    params = init_mlp((obs.embed_dim, 4, 1), seed=2)
    scores = predict_intra(params, obs)
    assert len(scores) == 2
    assert all(s.shape == (view.token_count,)
               for s, view in zip(scores, obs.views))
    with pytest.raises(ContractError):
        predict_intra(init_mlp((obs.embed_dim, 2), seed=0), obs)


def test_predict_inter_uses_concatenated_summaries():
    obs = make_obs(view_count=3)
    feats = inter_features(obs)
    assert feats.shape == (3 * obs.embed_dim,)
    assert np.array_equal(feats[:obs.embed_dim], obs.views[0].cls)
    params = init_mlp((feats.shape[0], 4, 3), seed=3)
    weights = predict_inter(params, obs)
    assert weights.shape == (3,)
    assert np.array_equal(weights, forward(params, feats[None, :])[0])


def test_predict_inter_checks_output_count():
    obs = make_obs(view_count=3)
    params = init_mlp((3 * obs.embed_dim, 4, 2), seed=0)
    with pytest.raises(ContractError):
        predict_inter(params, obs)


# ---------------------------------------------------------------------------
# losses


def test_bce_known_values():
    assert bce(0.5, 1.0) == pytest.approx(0.6931471805599453, rel=1e-12)
    assert bce(0.9, 1.0) == pytest.approx(0.10536051565782628, rel=1e-12)
    assert bce(0.9, 0.0) == pytest.approx(-math.log(0.1), rel=1e-9)


def test_bce_validates_inputs():
    with pytest.raises(ContractError):
        bce(1.5, 1.0)
    with pytest.raises(ContractError):
        bce(0.5, 0.3)


def test_loss_is_mean_of_elementwise_bce():
    params = init_mlp((2, 3, 2), seed=4)
    x = np.random.default_rng(1).normal(size=(5, 2))
    y = np.array([[0, 1], [1, 1], [0, 0], [1, 0], [1, 1]], dtype=float)
    p = forward(params, x)
    manual = sum(bce(p[i, j], y[i, j]) for i in range(5) for j in range(2))
    assert loss(params, x, y) == pytest.approx(manual / 10.0, rel=1e-12)
    assert loss(params, x, y, "sum") == pytest.approx(manual, rel=1e-12)


def test_loss_rejects_empty_and_non_binary():
    params = init_mlp((2, 1), seed=0)
    with pytest.raises(ContractError):
        loss(params, np.zeros((0, 2)), np.zeros((0, 1)))
    with pytest.raises(ContractError):
        loss(params, np.zeros((1, 2)), np.array([[0.5]]))
    with pytest.raises(ConfigError):
        loss(params, np.zeros((1, 2)), np.array([[1.0]]), "median")


def square_obs(frame_index=0, seed=0):
    """Observation whose 2x2 views line up with make_annotation's grids."""
    from test_core import make_grid
    views = tuple(make_grid(view_id=i, height=2, width=2, seed=seed + i)
                  for i in range(3))
    from mvprune.core import MultiViewObservation
    return MultiViewObservation(episode_id="ep", frame_index=frame_index,
                                views=views)


def test_loss_intra_and_inter_wiring():
    obs = square_obs()
    ann = make_annotation()
    frame = ann.frames[obs.frame_index]
    intra = init_mlp((obs.embed_dim, 4, 1), seed=5)
    inter = init_mlp((3 * obs.embed_dim, 4, 3), seed=6)
    x = np.concatenate([v.tokens for v in obs.views])
    y = np.concatenate([np.asarray(m, float) for m in frame.masks])[:, None]
    assert loss_intra(intra, obs, frame.masks) == pytest.approx(
        loss(intra, x, y), rel=1e-12)
    fx = inter_features(obs)[None, :]
    fy = np.asarray(frame.inter_labels, float)[None, :]
    assert loss_inter(inter, obs, frame.inter_labels) == pytest.approx(
        loss(inter, fx, fy), rel=1e-12)


def test_total_loss_combines_terms():
    assert total_loss(2.0, 3.0) == pytest.approx(0.5)
    assert total_loss(2.0, 3.0, lambda_inter=0.2, lambda_intra=0.4,
                      action_loss_hook=lambda: 1.0) == pytest.approx(2.6)
    with pytest.raises(TrainingError):
        total_loss(float("nan"), 0.0)
    with pytest.raises(TrainingError):
        total_loss(0.0, 0.0, action_loss_hook=lambda: float("inf"))


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("sizes, batch, reduction", [
    ((2, 1), 3, "mean"),
    ((3, 4, 1), 5, "mean"),
    ((2, 3, 2), 4, "sum"),
    ((4, 5, 3, 2), 6, "mean"),
])
def test_gradients_match_central_differences(sizes, batch, reduction):
    rng = np.random.default_rng(hash((sizes, batch)) % 2**32)
    params = init_mlp(sizes, seed=int(rng.integers(1000)))
    x = rng.normal(size=(batch, sizes[0]))
    y = rng.integers(0, 2, size=(batch, sizes[-1])).astype(float)
    value, grads = loss_and_grad(params, x, y, reduction)
    assert value == pytest.approx(loss(params, x, y, reduction), rel=1e-12)
    numeric = finite_difference_grads(params, x, y, reduction)
    for (dw, db), (nw, nb) in zip(grads, numeric):
        for got, want in ((dw, nw), (db, nb)):
            err = np.array([
                relative_error(g, w)
                for g, w in zip(got.reshape(-1), want.reshape(-1))])
            assert err.max() < 1e-4


def test_gradient_structure_mirrors_layers():
    params = init_mlp((3, 4, 2), seed=9)
    x = np.zeros((2, 3))
    y = np.zeros((2, 2))
    _, grads = loss_and_grad(params, x, y)
    assert len(grads) == len(params.layers)
    for (w, b), (dw, db) in zip(params.layers, grads):
        assert dw.shape == w.shape
        assert db.shape == b.shape


# ---------------------------------------------------------------------------
# training


def separable_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=(n, 1)).astype(float)
    x = y * np.array([[1.0, 0.0]]) + (1 - y) * np.array([[0.0, 1.0]])
    x = x + rng.normal(scale=0.05, size=x.shape)
    return x, y


def test_train_reduces_loss_on_separable_data():
    x, y = separable_data()
    params = init_mlp((2, 8, 1), seed=0)
    config = TrainConfig(learning_rate=0.5, steps=300, batch_size=16, seed=1)
    trained, losses = train(params, x, y, config)
    assert losses.shape == (300,)
    assert losses[-1] < 0.1 * losses[0]
    p = forward(trained, x)
    assert ((p > 0.5) == (y > 0.5)).mean() > 0.95


def test_train_is_deterministic():
    x, y = separable_data()
    params = init_mlp((2, 4, 1), seed=0)
    config = TrainConfig(steps=50, batch_size=8, seed=3)
    one, trace_one = train(params, x, y, config)
    two, trace_two = train(params, x, y, config)
    assert one == two
    assert np.array_equal(trace_one, trace_two)


def test_train_zero_learning_rate_is_identity():
    x, y = separable_data(16)
    params = init_mlp((2, 4, 1), seed=0)
    trained, losses = train(params, x, y,
                            TrainConfig(learning_rate=0.0, steps=5,
                                        batch_size=0))
    assert trained == params
    assert np.all(losses == losses[0])


def test_train_full_batch_records_pre_update_loss():
    x, y = separable_data(32)
    params = init_mlp((2, 4, 1), seed=0)
    config = TrainConfig(learning_rate=0.3, steps=3, batch_size=0)
    _, losses = train(params, x, y, config)
    assert losses[0] == pytest.approx(loss(params, x, y), rel=1e-12)
    assert losses[2] < losses[0]


def test_train_raises_on_divergence():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=(16, 1)).astype(float)
    x = rng.normal(scale=100.0, size=(16, 2))
    params = init_mlp((2, 4, 1), seed=0)
    config = TrainConfig(learning_rate=1e308, steps=50, batch_size=0)
    with pytest.raises(TrainingError) as err:
        train(params, x, y, config)
    assert err.value.step is not None


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(reduction="max")
    with pytest.raises(ContractError):
        TrainConfig(steps=-1)


# ---------------------------------------------------------------------------
# datasets


def test_build_intra_dataset_stacks_tokens_and_mask_bits():
    ann = make_annotation()
    observations = [square_obs(frame_index=t, seed=t) for t in range(2)]
    x, y = build_intra_dataset(observations, ann)
    total = sum(o.total_tokens for o in observations)
    assert x.shape == (total, observations[0].embed_dim)
    assert y.shape == (total, 1)
    first = observations[0]
    assert np.array_equal(x[:first.views[0].token_count],
                          first.views[0].tokens)
    assert y[1, 0] == 1.0  # the one set mask bit of the head view


def test_build_intra_dataset_rejects_misaligned_masks():
    ann = make_annotation()  # 2x2 grids
    observations = [make_obs()]  # 2x3 views
    with pytest.raises(ContractError):
        build_intra_dataset(observations, ann)


def test_build_inter_dataset_one_row_per_frame():
    ann = make_annotation()
    observations = [square_obs(frame_index=t, seed=t) for t in range(3)]
    x, y = build_inter_dataset(observations, {"ep": ann})
    assert x.shape == (3, 3 * observations[0].embed_dim)
    assert y.shape == (3, 3)
    assert y[:, 0].tolist() == [1.0, 1.0, 1.0]
    assert y[:, 1].tolist() == [0.0, 1.0, 0.0]


def test_dataset_requires_matching_annotation():
    observations = [square_obs()]
    other = make_annotation()
    wrong = {"different": other}
    with pytest.raises(ContractError):
        build_intra_dataset(observations, wrong)
    deep = square_obs(frame_index=99)
    with pytest.raises(ContractError):
        build_inter_dataset([deep], other)


# ---------------------------------------------------------------------------
# persistence


def test_params_round_trip_is_exact(tmp_path):
    params = init_mlp((3, 5, 2), seed=11)
    path = tmp_path / "net.mlp.json"
    save_params(path, params)
    again = load_params(path)
    assert again == params
    for (w, b), (w2, b2) in zip(params.layers, again.layers):
        assert np.array_equal(w, w2) and np.array_equal(b, b2)


def test_trace_round_trip_is_exact(tmp_path):
    losses = np.array([0.7, 0.35, 1e-9, 0.1234567890123456789])
    path = tmp_path / "trace.csv"
    save_trace(path, losses)
    again = load_trace(path)
    assert np.array_equal(again, losses)


def test_trace_rejects_bad_header(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("loss\n0.5\n")
    with pytest.raises(ParseError):
        load_trace(path)
