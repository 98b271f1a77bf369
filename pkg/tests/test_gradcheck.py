import numpy as np
import pytest

from remote_fusion import tensor
from remote_fusion.encoder import ConfigError
from remote_fusion.gradcheck import GradCheckReport, grad_check, relative_error, tiny_config
from remote_fusion.head import loss as ce_loss
from remote_fusion.model import RemoteModel, collate
from remote_fusion.synthetic import generate_synthetic
from remote_fusion.tensor import default_dtype, no_grad


@pytest.fixture(scope="module")
def report():
    return grad_check()


def test_tiny_config_passes(report):
    assert report.passed, "\n".join(report.lines())
    assert set(report.errors) == {
        "embed", "text_encoder", "vision_patch", "vision_encoder", "fusion", "cross_attention", "router", "classifier",
    }
    assert all(n > 0 for n in report.checked.values())


def test_report_lines(report):
    lines = report.lines()
    assert lines[-1] == "PASS"
    assert all(line.endswith("PASS") for line in lines)


def test_corrupted_sigmoid_backward_fails_only_fusion(monkeypatch):
    original = tensor._sigmoid_grad
    monkeypatch.setattr(tensor, "_sigmoid_grad", lambda out, g: 1.5 * original(out, g))
    bad = grad_check()
    assert bad.failed == ["fusion"]
    assert bad.lines()[-1] == "FAIL: fusion"


def test_constant_loss_has_zero_gradients():
    cfg = tiny_config(dropout=0.0)
    recs = generate_synthetic(cfg, 2, 0)
    with default_dtype(np.float64):
        model = RemoteModel(cfg, 0)
        for k in ("w1", "b1", "w2", "b2"):
            model.params[f"classifier.{k}"].data[...] = 0.0
        batch = collate(recs, cfg)

        def objective():
            return ce_loss(model.forward(batch).logits, batch.pair_gold)

        value = objective()
        assert float(value.data) == pytest.approx(np.log(cfg.n_relations))
        value.backward()
        for name, p in model.trainable().items():
            if name == "classifier.b2":
                continue
            assert np.abs(p.grad if p.grad is not None else 0.0).max() < 1e-6, name
        with no_grad():
            for name in ("embed.table", "fusion.text.1", "router.p_route"):
                flat = model.params[name].data.reshape(-1)
                keep = flat[0]
                flat[0] = keep + 1e-4
                up = float(objective().data)
                flat[0] = keep - 1e-4
                down = float(objective().data)
                flat[0] = keep
                assert abs(up - down) / 2e-4 < 1e-6


def test_rejects_non_tiny_config():
    with pytest.raises(ConfigError):
        grad_check(tiny_config(d=16))
    with pytest.raises(ConfigError, match="content tokens"):
        grad_check(tiny_config(**{"synthetic.n_filler": 6}))


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) < 1e-6


def test_report_fail_line():
    r = GradCheckReport({"a": 1e-5, "b": 2e-3})
    assert r.failed == ["b"] and r.lines()[-1] == "FAIL: b"
