import numpy as np
import pytest
import torch

from dcnseg.losses import LossConfig, head_targets, total_loss
from dcnseg.network import (
    AttentionModule,
    ConfigError,
    DCNNet,
    DenseBlock,
    ModelConfig,
    build_model,
    checksum,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

TINY = dict(stem_channels=4, growth_rate=2, ddb_dilations=((1, 1, 2), (1, 1, 2, 2), (1, 1, 2, 2, 4)))


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig(seed=1))


def tiny(**kw):
    return build_model(ModelConfig(**{**TINY, **kw}))


def test_dense_block_channels_and_shape():
    x = torch.randn(1, 16, 32, 32, 32)
    assert DenseBlock(16, 3, 8, (1, 1, 2))(x).shape == (1, 40, 32, 32, 32)
    assert DenseBlock(16, 5, 8, (1, 1, 2, 4, 8))(x).shape == (1, 56, 32, 32, 32)


def test_dense_block_receptive_field():
    block = DenseBlock(1, 5, 1, (1, 1, 2, 4, 8))
    block.eval()
    x = torch.randn(1, 1, 41, 41, 41, generator=torch.Generator().manual_seed(0)).requires_grad_()
    out = block(x)[0, -1, 20, 20, 20]
    out.backward()
    touched = np.nonzero(x.grad[0, 0].abs().sum((1, 2)).numpy())[0]
    assert touched.max() - touched.min() + 1 <= 33
    # the last layer alone spans 17 voxels, the whole chain 33
    assert touched.max() - touched.min() + 1 > 17


def test_dense_block_too_small():
    with pytest.raises(ConfigError, match="dilation 8"):
        DenseBlock(1, 5, 2, (1, 1, 2, 4, 8))(torch.zeros(1, 1, 16, 16, 16))


@pytest.mark.parametrize(
    "kw",
    [
        dict(ddb_layers=(3, 4)),
        dict(ddb_dilations=((1, 1), (1, 1, 2, 4), (1, 1, 2, 4, 8))),
        dict(ddb_dilations=((1, 2, 1), (1, 1, 2, 4), (1, 1, 2, 4, 8))),
        dict(ddb_dilations=((1, 1, 3), (1, 1, 2, 4), (1, 1, 2, 4, 8))),
        dict(head_prior=1.5),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_attention_module():
    att = AttentionModule(6, 4)
    skip, gate = torch.randn(2, 6, 16, 16, 16), torch.randn(2, 4, 8, 8, 8)
    out, score = att(skip, gate)
    assert out.shape == skip.shape and score.shape == (2, 1, 16, 16, 16)
    assert score.min() > 0 and score.max() < 1
    for p in att.parameters():
        torch.nn.init.zeros_(p)
    _, score = att(skip, gate)
    assert torch.all(score == 0.5)
    out32, _ = AttentionModule(3, 4)(torch.randn(1, 3, 32, 32, 32), torch.randn(1, 4, 16, 16, 16))
    assert out32.shape == (1, 3, 32, 32, 32)


def test_default_parameter_count(default_model):
    n = parameter_count(default_model)
    assert 3e5 <= n <= 3e6
    assert parameter_count(build_model(ModelConfig(seed=9))) == n


def test_seeded_checksum(default_model):
    assert checksum(build_model(ModelConfig(seed=1))) == checksum(default_model)
    assert checksum(build_model(ModelConfig(seed=2))) != checksum(default_model)


def test_encoder_preserves_shape(default_model):
    default_model.eval()
    with torch.no_grad():
        feats = default_model.encode(torch.randn(1, 1, 32, 32, 32))
    c = default_model.config
    expect = c.stem_channels + 3 * c.growth_rate
    for f, layers in zip(feats, c.ddb_layers):
        assert f.shape[2:] == (32, 32, 32)
    assert feats[0].shape[1] == expect
    assert feats[1].shape[1] == expect // 2 + 4 * c.growth_rate
    assert feats[2].shape[1] == (expect // 2 + 4 * c.growth_rate) // 2 + 5 * c.growth_rate


def test_forward_contracts(default_model):
    default_model.eval()
    x = torch.randn(8, 1, 32, 32, 32)
    with torch.no_grad():
        out = default_model(x)
        again = default_model(x)
    for p in (out.dentate, out.interposed, out.attention):
        assert p.shape == (8, 2, 32, 32, 32)
        assert (p.sum(1) - 1).abs().max() < 1e-5
    # float32 sigmoid can round to exactly 1 on an untrained net
    assert all(0 <= s.min() and s.max() <= 1 for s in out.scores)
    assert torch.equal(out.dentate, again.dentate) and torch.equal(out.interposed, again.interposed)
    with torch.no_grad():
        scaled = default_model(2 * x[:1])
    assert (scaled.dentate - out.dentate[:1]).abs().max() > 0


def test_forward_rejects_bad_shape():
    with pytest.raises(ValueError, match="divisible by 4"):
        tiny()(torch.zeros(1, 1, 18, 16, 16))


def test_explicit_pyramids_match_default():
    m = tiny().eval()
    x = torch.randn(1, 1, 16, 16, 16)
    pyr = [torch.nn.functional.avg_pool3d(x, 2), torch.nn.functional.avg_pool3d(x, 4)]
    with torch.no_grad():
        assert torch.equal(m(x).dentate, m(x, pyr).dentate)


def test_head_prior_initialization():
    m = tiny(head_prior=0.01).eval()
    with torch.no_grad():
        out = m(torch.randn(2, 1, 16, 16, 16))
    assert out.dentate[:, 1].mean() < 0.1 and out.interposed[:, 1].mean() < 0.1
    m = tiny(head_prior=None)
    assert torch.all(m.head_dentate.bias == 0)


def test_head_independence():
    m = tiny().eval()
    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        before = m(x)
        m.head_dentate.weight.add_(0.5)
        after = m(x)
    assert not torch.equal(before.dentate, after.dentate)
    assert torch.equal(before.interposed, after.interposed)


def test_gradient_reaches_every_group():
    m = tiny()
    x = torch.randn(2, 1, 16, 16, 16)
    labels = torch.zeros(2, 16, 16, 16, dtype=torch.long)
    labels[:, 4:8, 4:8, 4:8] = 1
    labels[:, 10:12, 10:12, 10:12] = 2
    loss, _ = total_loss(m(x), head_targets(labels), LossConfig(), [0.1, 0.9], [0.05, 0.95])
    loss.backward()
    groups = {
        "stem": m.stem,
        "ddb1": m.ddb[0],
        "ddb2": m.ddb[1],
        "ddb3": m.ddb[2],
        "att1": m.att1,
        "att2": m.att2,
        "head_d": m.head_dentate,
        "head_i": m.head_interposed,
        "head_a": m.head_attention,
    }
    for name, mod in groups.items():
        norm = sum(p.grad.norm() ** 2 for p in mod.parameters() if p.grad is not None)
        assert norm > 0, name


def test_joint_head():
    m = tiny(joint_head=True).eval()
    with torch.no_grad():
        out = m(torch.randn(1, 1, 16, 16, 16))
    assert out.dentate is None and out.joint.shape == (1, 3, 16, 16, 16)
    assert (out.joint.sum(1) - 1).abs().max() < 1e-5


def test_checkpoint_round_trip(tmp_path):
    m = tiny(seed=3).eval()
    save_checkpoint(m, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert checksum(loaded) == checksum(m)
    assert isinstance(loaded, DCNNet) and loaded.config == m.config
    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        assert torch.equal(loaded(x).dentate, m(x).dentate)


def test_checkpoint_bad_version(tmp_path):
    import json

    save_checkpoint(tiny(), tmp_path / "ck")
    meta = json.loads((tmp_path / "ck" / "meta.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "ck" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ConfigError, match="format"):
        load_checkpoint(tmp_path / "ck")
