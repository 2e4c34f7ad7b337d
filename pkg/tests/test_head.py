import numpy as np
import pytest

from srpn import tensor as T
from srpn.anchors import AnchorSpec, generate_array
from srpn.gradcheck import numeric_grad, rel_error
from srpn.head import (HeadConfig, build, extract_anchor_views, flatten_map, forward, load_checkpoint,
                       predict, save_checkpoint, unflatten_map)
from srpn.trainer import TrainConfig, image_loss


def test_build_is_seed_deterministic():
    a, b = build(HeadConfig(), 3), build(HeadConfig(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build(HeadConfig(), 4)
    assert a.params["conv1.weight"].data.tobytes() != c.params["conv1.weight"].data.tobytes()


def test_parameter_count_closed_form():
    # backbone 3->16->32->32, conv1 32->32 (3x3), heads 1x1: 36, 180, 9 (classifier on embeddings)
    expected = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + (32 * 32 * 9 + 32) \
        + (36 * 32 + 36) + (180 * 32 + 180) + (9 * 180 + 9)
    assert expected == 32341
    model = build(HeadConfig(), 0)
    assert sum(p.size for p in model.parameters()) == expected
    assert HeadConfig().parameter_count() == expected
    shared = HeadConfig(classifier_input="shared")
    assert shared.parameter_count() == expected - (9 * 180 + 9) + (9 * 32 + 9)


def test_channel_bookkeeping():
    cfg = HeadConfig(num_anchor=9, dim_embedding=20)
    assert (cfg.c3, cfg.c4, cfg.c5) == (36, 180, 9)


def test_init_statistics():
    model = build(HeadConfig(), 0)
    for name in ("conv2", "conv3", "conv4"):
        w = model.params[f"{name}.weight"].data
        assert abs(w.std() - 0.01) < 0.002
        assert not model.params[f"{name}.bias"].data.any()


def test_forward_shapes_and_initial_scores():
    model = build(HeadConfig(), 0)
    img = np.random.default_rng(0).uniform(size=(3, 64, 64))
    out = forward(model, img)
    assert out.offsets.shape == (36, 8, 8)
    assert out.embeddings.shape == (180, 8, 8)
    assert out.scores.shape == (9, 8, 8)
    assert np.all(np.abs(out.scores.data - 0.5) < 0.05)
    assert np.all((out.scores.data > 0) & (out.scores.data < 1))


def test_forward_rejects_bad_dims():
    model = build(HeadConfig(), 0)
    with pytest.raises(ValueError, match="divisible"):
        forward(model, np.zeros((3, 60, 64)))
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 64, 64)))


def test_forward_has_no_side_effects():
    model = build(HeadConfig(), 1)
    before = {k: v.copy() for k, v in model.state().items()}
    img = np.random.default_rng(1).uniform(size=(3, 32, 32))
    a = predict(model, img)
    b = predict(model, img)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    for k, v in model.state().items():
        assert v.tobytes() == before[k].tobytes()


def test_translation_equivariance():
    model = build(HeadConfig(head_init_std=0.3), 2)
    rng = np.random.default_rng(2)
    img = np.zeros((3, 64, 64))
    img[:, 20:36, 16:32] = rng.uniform(size=(3, 16, 16))
    shifted = np.zeros_like(img)
    shifted[:, :, 8:] = img[:, :, :-8]
    a = predict(model, img)
    b = predict(model, shifted)
    for x, y in zip(a, b):
        np.testing.assert_allclose(y[:, :, 1:], x[:, :, :-1], rtol=1e-10, atol=1e-12)


def test_classifier_reads_embeddings():
    model = build(HeadConfig(), 0)
    img = np.random.default_rng(3).uniform(size=(3, 16, 16))
    base = predict(model, img)[2]
    model.params["conv3.bias"].data = model.params["conv3.bias"].data + 5.0
    assert not np.allclose(predict(model, img)[2], base)
    shared = build(HeadConfig(classifier_input="shared"), 0)
    base = predict(shared, img)[2]
    shared.params["conv3.bias"].data = shared.params["conv3.bias"].data + 5.0
    np.testing.assert_array_equal(predict(shared, img)[2], base)


def test_views_single_anchor():
    cfg = HeadConfig(backbone_channels=(4,), c2=4, num_anchor=1, dim_embedding=3)
    out = forward(build(cfg, 0), np.zeros((3, 2, 2)))
    views = extract_anchor_views(out, np.array([0]))
    assert views.offsets.shape == (1, 4) and views.embeddings.shape == (1, 3) and views.scores.shape == (1,)


def test_flatten_roundtrip():
    rng = np.random.default_rng(4)
    for a, k in [(9, 4), (9, 20), (2, 1)]:
        x = rng.normal(size=(a * k, 3, 5))
        flat = flatten_map(T.Tensor(x), k).data
        np.testing.assert_array_equal(unflatten_map(flat, a, 3, 5), x)
        # row (r * W + c) * A + anchor holds channels anchor*k .. anchor*k+k-1 at (r, c)
        assert np.array_equal(flat[(2 * 5 + 1) * a + (a - 1)], x[(a - 1) * k:a * k, 2, 1])


def test_view_count_excludes_ignored():
    model = build(HeadConfig(), 0)
    out = forward(model, np.zeros((3, 32, 32)))
    labels = np.random.default_rng(5).choice([-1, 0, 1], size=9 * 16)
    views = extract_anchor_views(out, labels)
    assert len(views.index) == (labels != -1).sum()
    with pytest.raises(ValueError, match="anchor labels"):
        extract_anchor_views(out, labels[:-1])


def test_checkpoint_roundtrip(tmp_path):
    model = build(HeadConfig(backbone_channels=(8, 8)), 11)
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, p, extra={"note": "x"})
    back = load_checkpoint(p)
    assert back.config == model.config and back.seed == 11
    for k, v in model.state().items():
        assert back.state()[k].tobytes() == v.tobytes()
    p2 = tmp_path / "m2.ckpt"
    save_checkpoint(back, p2, extra={"note": "x"})
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a model checkpoint"):
        load_checkpoint(p)


def _micro_setup(mode):
    spec = AnchorSpec(scales=(6.0, 10.0), ratios=(1.0,), stride=4)
    head = HeadConfig(backbone_channels=(3, 4), c2=4, num_anchor=2, dim_embedding=3, head_init_std=0.3)
    cfg = TrainConfig(anchor_spec=spec, head=head, embed_mode=mode, margin=4.0, augment=False, iterations=1)
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(3, 16, 16))
    boxes = [(2.0, 3.0, 7.0, 6.0), (9.0, 8.0, 5.0, 6.0)]
    return cfg, img, boxes


@pytest.mark.parametrize("mode", ["none", "pair", "triplet"])
def test_end_to_end_gradient(mode):
    cfg, img, boxes = _micro_setup(mode)
    model = build(cfg.head, 0)
    anchors = generate_array(cfg.anchor_spec, 4, 4)
    names = [n for n, _ in model.named_parameters()]

    def loss_of(*params):
        for n, p in zip(names, params):
            model.params[n] = p
        return image_loss(model, cfg, img, boxes, 0, anchors)[0].total

    leaves = [T.Tensor(p.data.copy(), requires_grad=True) for p in model.parameters()]
    T.backward(loss_of(*leaves))
    ana = [l.grad for l in leaves]
    frozen = [T.Tensor(l.data.copy()) for l in leaves]
    for i, a in enumerate(ana):
        num = numeric_grad(loss_of, frozen, i, eps=1e-5)
        assert rel_error(a, num) < 1e-3, names[i]
