import dataclasses

import numpy as np
import pytest

from srpn import tensor as T
from srpn.anchors import AnchorSpec
from srpn.evaluator import EvalConfig
from srpn.head import HeadConfig, save_checkpoint
from srpn.synth import SceneSpec, generate_dataset
from srpn.trainer import (LOG_COLUMNS, TrainConfig, TrainingDiverged, batch_loss, sgd_step, sweep_margins, train,
                          write_log_csv)
from srpn.head import build


def small_cfg(**kw):
    base = dict(iterations=3, batch_size=2, head=HeadConfig(backbone_channels=(8, 8, 8), c2=8, dim_embedding=6))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SceneSpec(image_size=32, object_count_range=(1, 2), clutter_count_range=(0, 1)), 4,
                            seed=9)


def test_sgd_examples():
    p, g = [np.array([1.0, -2.0])], [np.array([0.5, 0.25])]
    new, _ = sgd_step(p, [np.zeros(2)], 0.1, 0.9)
    np.testing.assert_array_equal(new[0], p[0])
    new, _ = sgd_step(p, g, 0.1, 0.0)
    np.testing.assert_array_equal(new[0], p[0] - 0.1 * g[0])
    p1, v = sgd_step(p, g, 0.1, 0.9)
    p2, _ = sgd_step(p1, g, 0.1, 0.9, v)
    np.testing.assert_allclose(p[0] - p2[0], 0.1 * g[0] * 2.9, rtol=0, atol=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1, 0.9)
    with pytest.raises(ValueError):
        sgd_step([np.zeros(2)], [], 0.1, 0.9)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(embed_mode="quadruplet")
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError, match="anchors per location"):
        TrainConfig(anchor_spec=AnchorSpec(scales=(8,), ratios=(1.0,)))


def test_zero_learning_rate_leaves_parameters(data):
    cfg = small_cfg(learning_rate=0.0, iterations=1)
    before = build(cfg.head, cfg.seed).state()
    after = train(cfg, data).model.state()
    for k in before:
        assert before[k].tobytes() == after[k].tobytes()


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        train(small_cfg(), [])


@pytest.mark.parametrize("mode", ["none", "pair", "triplet"])
def test_full_batch_loss_decreases(data, mode):
    cfg = small_cfg(embed_mode=mode, augment=False, batch_size=2, learning_rate=1e-3, margin=2.0)
    model = build(cfg.head, 0)
    batch = data[:2]
    params = model.parameters()
    velocity = None
    losses = []
    for _ in range(6):
        model.zero_grad()
        # iteration index fixed so the sampled pairs/triplets stay the same
        loss, _ = batch_loss(model, cfg, batch, 0)
        losses.append(loss.item())
        T.backward(loss)
        new_p, velocity = sgd_step([p.data for p in params], [p.grad for p in params], cfg.learning_rate,
                                   cfg.momentum, velocity)
        for p, d in zip(params, new_p):
            p.data = d
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_deterministic(data, tmp_path):
    cfg = small_cfg(embed_mode="triplet", margin=2.0)
    paths = []
    for run in range(2):
        res = train(cfg, data)
        ck, lg = tmp_path / f"m{run}.ckpt", tmp_path / f"log{run}.csv"
        save_checkpoint(res.model, ck)
        write_log_csv(lg, res.log)
        paths.append((ck.read_bytes(), lg.read_bytes()))
    assert paths[0] == paths[1]
    other = train(dataclasses.replace(cfg, data_seed=1), data)
    assert [r.loss_total for r in other.log] != [r.loss_total for r in train(cfg, data).log]


def test_log_rows_are_finite(data, tmp_path):
    res = train(small_cfg(embed_mode="pair"), data)
    assert [r.iteration for r in res.log] == [0, 1, 2]
    for r in res.log:
        assert np.isfinite([r.loss_total, r.loss_embed, r.loss_loc, r.loss_cls]).all()
        assert r.positives > 0 and r.negatives_sampled > 0
    write_log_csv(tmp_path / "log.csv", res.log)
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == ",".join(LOG_COLUMNS)


def test_none_mode_has_zero_embedding_term(data):
    res = train(small_cfg(embed_mode="none"), data)
    assert all(r.loss_embed == 0.0 for r in res.log)


def test_divergence_aborts_with_iteration(data):
    cfg = small_cfg(iterations=5)
    model = build(cfg.head, cfg.seed)

    def poison(rec):
        if rec.iteration == 1:
            model.params["conv2.bias"].data = np.full_like(model.params["conv2.bias"].data, np.nan)

    with pytest.raises(TrainingDiverged) as err:
        train(cfg, data, model=model, callback=poison)
    assert err.value.iteration == 2
    assert "iteration 2" in str(err.value)


def test_sweep_rows(data):
    cfg = small_cfg(embed_mode="pair", iterations=1)
    rows = sweep_margins(cfg, [1.0], data, data[:1], EvalConfig())
    assert len(rows) == 1 and rows[0]["margin"] == 1.0 and rows[0]["embed_mode"] == "pair"
    rows = sweep_margins(cfg, [0.5, 2.0], data, data[:1], EvalConfig())
    assert [r["margin"] for r in rows] == [0.5, 2.0]
    with pytest.raises(ValueError):
        sweep_margins(cfg, [], data, data[:1])
