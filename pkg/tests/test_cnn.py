import numpy as np
import pytest
import torch

from maize_abnormality.bundles import TrainedModelBundle
from maize_abnormality.classifiers.cnn import (CustomHead, CustomHeadConfig, TrainConfig, WindowCNNClassifier,
                                               _batches, build_custom_efficientnet, one_cycle_lr, train_cnn)
from maize_abnormality.exceptions import EmptyManifest, GeometryMismatch, ShapeMismatch
from maize_abnormality.geometry import WindowRect
from maize_abnormality.synthetic import make_tile_corpus
from maize_abnormality.tiling import DatasetManifest, Label, OriginKind, TileRecord

REDUCED = CustomHeadConfig.reduced(8, fc_widths=(8, 6, 2))


@pytest.fixture(scope="module")
def b0_model():
    torch.manual_seed(0)
    return build_custom_efficientnet(CustomHeadConfig(), "efficientnet_b0").eval()


@pytest.mark.parametrize("batch", [1, 8])
def test_full_model_emits_two_logits(b0_model, batch):
    with torch.no_grad():
        out = b0_model(torch.rand(batch, 3, 250, 250))
    assert out.shape == (batch, 2)
    assert torch.isfinite(out).all()


def test_default_head_layout(b0_model):
    head = b0_model.head
    convs = [m for m in head.convs if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [1280, 1280]
    assert [c.kernel_size for c in convs] == [(3, 3), (3, 3)]
    linears = [m for m in head.classifier if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in linears] == [(1280, 512), (512, 128), (128, 2)]
    assert head.attention.query.out_channels == 160


def test_head_skip_requires_matching_channels():
    with pytest.raises(ShapeMismatch):
        CustomHead(12, CustomHeadConfig.reduced(8))


@pytest.mark.parametrize("kwargs", [dict(fc_widths=(8, 4, 3)), dict(n_conv_blocks=3), dict(kernel_size=2),
                                    dict(attention_kind="channel")])
def test_head_config_validation(kwargs):
    with pytest.raises(ValueError):
        CustomHeadConfig(**kwargs)


def _relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def test_head_gradient_matches_finite_differences():
    torch.manual_seed(0)
    head = CustomHead(8, REDUCED).double().eval()
    x = torch.randn(3, 8, 5, 5, dtype=torch.float64, requires_grad=True)
    target = torch.tensor([0, 1, 1])

    def loss_fn():
        return torch.nn.functional.cross_entropy(head(x), target)

    loss_fn().backward()
    params = [x] + [p for p in head.parameters()]
    analytic = [p.grad.detach().numpy().copy() for p in params]
    eps = 1e-6
    rng = np.random.default_rng(0)
    for p, grad in zip(params, analytic):
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(12, flat.numel()), replace=False)
        numeric = []
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
        assert _relative_error(grad.reshape(-1)[idx], np.array(numeric)) <= 1e-3


def test_skip_path_carries_gradient_without_branch():
    torch.manual_seed(0)
    head = CustomHead(8, REDUCED)
    x = torch.randn(2, 8, 4, 4, requires_grad=True)
    head(x, use_branch=False).sum().backward()
    assert x.grad.norm() > 0
    assert all(p.grad is None for p in head.convs.parameters())


def test_attention_is_convex_combination():
    torch.manual_seed(0)
    head = CustomHead(8, REDUCED)
    att = head.attention
    x = torch.randn(2, 8, 3, 3)
    # a constant value map is preserved by any row-stochastic attention
    with torch.no_grad():
        att.value.weight.zero_()
        att.value.bias.fill_(2.5)
        assert torch.allclose(att(x), torch.full_like(x, 2.5))


def test_one_cycle_shape():
    lrs = [one_cycle_lr(e, 100, 1e-4) for e in range(100)]
    assert lrs[0] == pytest.approx(1e-4)
    assert max(lrs) == pytest.approx(1e-3)
    assert int(np.argmax(lrs)) == 30
    assert lrs[-1] == pytest.approx(1e-8)
    assert all(a <= b for a, b in zip(lrs[:30], lrs[1:31]))
    assert all(a >= b for a, b in zip(lrs[30:], lrs[31:]))


def test_batches_never_leave_a_singleton():
    order = np.arange(17)
    sizes = [len(b) for b in _batches(order, 8)]
    assert sizes == [8, 9]
    assert np.array_equal(np.concatenate(_batches(order, 8)), order)
    assert [len(b) for b in _batches(np.arange(1), 8)] == [1]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="adam")
    with pytest.raises(ValueError):
        TrainConfig(augmentation=("rotate",))
    params = TrainConfig(epochs=3, seed=7).estimator_params()
    assert params["epochs"] == 3 and params["random_state"] == 7


def _tiny(**kw):
    params = dict(head_config=CustomHeadConfig.reduced(16), trunk="tiny", epochs=2, batch_size=8,
                  learning_rate=3e-3, random_state=0)
    params.update(kw)
    return WindowCNNClassifier(**params)


def test_fit_history_and_best_epoch():
    X, y = make_tile_corpus(24, side=64, seed=0, patch=(10, 20))
    est = _tiny().fit(X[:16], y[:16], X[16:], y[16:])
    assert [r["epoch"] for r in est.history_] == [1, 2]
    assert all(r["val_acc"] is not None for r in est.history_)
    best = max(r["val_acc"] for r in est.history_)
    assert est.history_[est.best_epoch_ - 1]["val_acc"] == best
    proba = est.predict_proba(X)
    assert proba.shape == (24, 2) and np.allclose(proba.sum(1), 1, atol=1e-6)
    with pytest.raises(GeometryMismatch):
        est.predict(np.zeros((1, 32, 32, 3), np.uint8))


def test_fit_rejects_empty():
    with pytest.raises(EmptyManifest):
        _tiny().fit(np.zeros((0, 64, 64, 3), np.uint8), [])
    X, y = make_tile_corpus(4, side=64, patch=(10, 20))
    with pytest.raises(EmptyManifest):
        _tiny().fit(X, y, X[:0], y[:0])


def _manifest(name, y, side, start=0):
    tiles = [TileRecord(f"{name}{start + i:03d}", "img", WindowRect(0, 0, side),
                        Label.ABNORMAL if v else Label.NORMAL, OriginKind.RANDOM_CROP) for i, v in enumerate(y)]
    return DatasetManifest(name, tiles, tile_side=side)


def test_train_cnn_bundle_round_trip(tmp_path):
    X, y = make_tile_corpus(20, side=64, seed=1, patch=(10, 20))
    train, val = _manifest("tr", y[:16], 64), _manifest("va", y[16:], 64)
    cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=3e-3)
    bundle = train_cnn(_tiny(), train, val, cfg, X=X[:16], X_val=X[16:])
    assert len(bundle.metrics) == 2 and {"epoch", "train_acc", "val_acc", "lr"} <= set(bundle.metrics[0])
    bundle.save(tmp_path / "cnn")
    lines = (tmp_path / "cnn" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    back = TrainedModelBundle.load(tmp_path / "cnn", kind="cnn")
    assert np.allclose(back.estimator.logits(X), bundle.estimator.logits(X), atol=1e-5)
    assert back.meta["best_epoch"] == bundle.meta["best_epoch"]


def test_train_cnn_empty_validation():
    X, y = make_tile_corpus(4, side=64, patch=(10, 20))
    with pytest.raises(EmptyManifest):
        train_cnn(_tiny(), _manifest("tr", y, 64), _manifest("va", [], 64), X=X, X_val=X[:0])


def test_train_cnn_rejects_overlap():
    X, y = make_tile_corpus(4, side=64, patch=(10, 20))
    m = _manifest("tr", y, 64)
    with pytest.raises(ValueError):
        train_cnn(_tiny(), m, m, X=X, X_val=X)


def test_pretrained_without_weights_falls_back(monkeypatch):
    import maize_abnormality.classifiers.cnn as cnn
    monkeypatch.setattr(cnn, "_pretrained_b0_path", lambda: None)
    with pytest.warns(UserWarning):
        model = build_custom_efficientnet(CustomHeadConfig(), "efficientnet_b0", pretrained=True)
    assert model.pretrained_trunk is False
