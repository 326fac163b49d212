import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcnseg import losses as L
from dcnseg.network import ForwardOutput

import oracles


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def rand_probs(rng, shape):
    """Two-channel probabilities away from the clip boundary."""
    fg = rng.uniform(0.05, 0.95, size=shape)
    return np.stack([1 - fg, fg], 1)


def rand_onehot(rng, shape, p=0.3):
    m = rng.random(shape) < p
    return np.stack([~m, m], 1).astype(np.float64)


# -- one-hot and weights ------------------------------------------------------

def test_one_hot_definition():
    g = L.one_hot_encode([[1, 2, 1]])
    assert g[0, 0].tolist() == [1, 0, 1]
    assert g[0, 1].tolist() == [0, 1, 0]


def test_one_hot_all_background():
    g = L.one_hot_encode(np.ones((1, 4, 4, 4), dtype=int))
    assert g[:, 1].sum() == 0


def test_one_hot_round_trip():
    rng = np.random.default_rng(0)
    lab = rng.integers(1, 3, size=(3, 4, 4, 4))
    g = L.one_hot_encode(lab)
    assert torch.equal(g.argmax(1) + 1, torch.as_tensor(lab))
    assert torch.all(g.sum(1) == 1)


def test_one_hot_rejects_out_of_range_and_names_voxel():
    lab = np.ones((1, 2, 2, 2), dtype=int)
    lab[0, 1, 0, 1] = 3
    with pytest.raises(ValueError, match=r"\(0, 1, 0, 1\)"):
        L.one_hot_encode(lab)


def test_class_weights_formula():
    m = np.zeros(1000, dtype=np.uint8)
    m[:100] = 1
    np.testing.assert_allclose(L.class_weights([m], "dentate"), [0.1, 0.9])


def test_class_weights_balanced():
    m = np.array([1, 1, 0, 0], dtype=np.uint8)
    np.testing.assert_allclose(L.class_weights([m], "dentate"), [0.5, 0.5])


def test_class_weights_absent_structure_warns_and_clamps():
    m = np.zeros(10, dtype=np.uint8)
    with pytest.warns(UserWarning):
        w = L.class_weights([m], "interposed")
    np.testing.assert_allclose(w, [1e-3, 1.0])


# -- hand values --------------------------------------------------------------

def micro_example():
    g2 = np.array([1.0, 0.0])
    p2 = np.array([0.8, 0.4])
    p = np.stack([1 - p2, p2])[None]
    g = np.stack([1 - g2, g2])[None]
    return p, g


def test_tversky_micro_value():
    p, g = micro_example()
    tl = L.tversky_loss(t64(p), t64(g), 0.3, 0.7)
    assert abs(float(tl[1]) - (1 - 0.8 / 1.14)) < 1e-9
    assert abs(float(tl[1]) - 0.29825) < 1e-5
    assert abs(float(tl[1]) - oracles.tversky(p, g, 0.3, 0.7)[1]) < 1e-12


def test_tversky_soft_dice_micro_value():
    p, g = micro_example()
    tl = L.tversky_loss(t64(p), t64(g), 0.5, 0.5)
    assert abs(float(tl[1]) - (1 - 1.6 / 2.2)) < 1e-9


def test_tversky_perfect_prediction_is_zero():
    rng = np.random.default_rng(1)
    g = rand_onehot(rng, (2, 4, 4, 4))
    assert float(L.tversky_loss(t64(g), t64(g)).abs().max()) < 1e-6


def test_tversky_empty_class_and_empty_prediction():
    g = np.zeros((1, 2, 3, 3, 3))
    g[:, 0] = 1
    tl = L.tversky_loss(t64(g), t64(g))
    assert float(tl[1]) == 0.0


def test_focal_values():
    p = t64([[[0.5], [0.5]]])
    g = t64([[[0.0], [1.0]]])
    fl = L.focal_loss(p, g)
    np.testing.assert_allclose(fl.numpy(), [0.25 * math.log(2)] * 2, atol=1e-12)
    g_zero = L.focal_loss(t64(micro_example()[1]), t64(micro_example()[1]))
    assert float(g_zero.max()) < 1e-12


def test_focal_uniform_half_is_independent_of_labels():
    rng = np.random.default_rng(2)
    p = np.full((2, 2, 3, 3, 3), 0.5)
    for _ in range(3):
        g = rand_onehot(rng, (2, 3, 3, 3), rng.uniform())
        np.testing.assert_allclose(L.focal_loss(t64(p), t64(g)).numpy(), [0.25 * math.log(2)] * 2)


def test_hybrid_composition_matches_oracle():
    p, g = micro_example()
    h = L.hybrid_loss(t64(p), t64(g), (0.5, 0.5), 0.5, 0.5)
    assert abs(float(h) - oracles.hybrid(p, g, (0.5, 0.5), 0.5, 0.5, 0.3, 0.7)) < 1e-12
    assert float(L.hybrid_loss(t64(g), t64(g), (0.5, 0.5))) < 1e-6


def test_hybrid_without_focal_is_weighted_tversky():
    rng = np.random.default_rng(3)
    p, g = rand_probs(rng, (2, 4, 4, 4)), rand_onehot(rng, (2, 4, 4, 4))
    w = (0.2, 0.8)
    h = L.hybrid_loss(t64(p), t64(g), w, pi_t=0.5, pi_f=0.0)
    tl = L.tversky_loss(t64(p), t64(g))
    assert abs(float(h) - float(0.5 * (w[0] * tl[0] + w[1] * tl[1]))) < 1e-12


def test_attention_loss_values():
    rng = np.random.default_rng(4)
    gu = rand_onehot(rng, (2, 4, 4, 4))
    assert float(L.attention_loss(t64(gu), t64(gu))) <= -math.log(1 - 1e-7) + 1e-15
    half = np.full_like(gu, 0.5)
    assert abs(float(L.attention_loss(t64(half), t64(gu))) - math.log(2)) < 1e-12


def test_union_target_is_set_union():
    rng = np.random.default_rng(5)
    lab = rng.choice([0, 1, 2], size=(2, 5, 5, 5), p=[0.6, 0.3, 0.1])
    gu = L.head_targets(lab)["union"].numpy()
    manual = np.logical_or(lab == 1, lab == 2)
    np.testing.assert_array_equal(gu[:, 1].astype(bool), manual)
    np.testing.assert_array_equal(gu[:, 0].astype(bool), ~manual)


def two_channel(fg):
    fg = np.asarray(fg, dtype=np.float64)[None]
    return t64(np.stack([1 - fg, fg], 1))


def test_overlap_values():
    assert float(L.overlap_loss(two_channel([1.0, 0.0]), two_channel([0.0, 1.0]))) == 0.0
    assert float(L.overlap_loss(two_channel([1.0, 1.0]), two_channel([1.0, 1.0]))) == 1.0
    v = float(L.overlap_loss(two_channel([1.0, 0.5]), two_channel([0.5, 0.5])))
    assert abs(v - 0.6) < 1e-12
    assert float(L.overlap_loss(two_channel([0.0, 0.0]), two_channel([0.0, 0.0]))) == 0.0


# -- total loss ---------------------------------------------------------------

def make_output(pd, pi, pa):
    return ForwardOutput(t64(pd), t64(pi), t64(pa), [])


def test_total_loss_perfect_prediction():
    rng = np.random.default_rng(6)
    lab = rng.choice([0, 1, 2], size=(2, 4, 4, 4), p=[0.6, 0.3, 0.1])
    tg = L.head_targets(lab, torch.float64)
    out = ForwardOutput(tg["dentate"], tg["interposed"], tg["union"], [])
    total, _ = L.total_loss(out, tg, L.LossConfig(), (0.5, 0.5), (0.5, 0.5))
    assert float(total) <= 1e-6


def test_total_loss_linearity_without_regularizers():
    rng = np.random.default_rng(7)
    shape = (2, 4, 4, 4)
    pd, pi, pa = rand_probs(rng, shape), rand_probs(rng, shape), rand_probs(rng, shape)
    lab = rng.choice([0, 1, 2], size=shape, p=[0.6, 0.3, 0.1])
    cfg = L.LossConfig(lambda_a=0.0, lambda_o=0.0)
    total, terms = L.total_loss(make_output(pd, pi, pa), L.head_targets(lab, torch.float64), cfg, (0.3, 0.7), (0.1, 0.9))
    assert abs(float(total) - (terms["L_D"] + terms["L_I"])) < 1e-12


def test_total_loss_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    shape = (2, 4, 4, 4)
    pd, pi, pa = rand_probs(rng, shape), rand_probs(rng, shape), rand_probs(rng, shape)
    lab = rng.choice([0, 1, 2], size=shape, p=[0.6, 0.3, 0.1])
    wd, wi = (0.3, 0.7), (0.05, 0.95)
    total, _ = L.total_loss(make_output(pd, pi, pa), L.head_targets(lab, torch.float64), L.LossConfig(), wd, wi)
    assert abs(float(total) - oracles.total(pd, pi, pa, lab, wd, wi)) < 1e-10


def test_joint_head_uses_multiclass_dice():
    rng = np.random.default_rng(9)
    lab = rng.choice([0, 1, 2], size=(2, 4, 4, 4))
    tg = L.head_targets(lab, torch.float64)
    out = ForwardOutput(None, None, t64(rand_probs(rng, (2, 4, 4, 4))), [], tg["joint"])
    total, terms = L.total_loss(out, tg, L.LossConfig())
    assert abs(float(total)) < 1e-12 and set(terms) == {"L_joint", "total"}


# -- properties ---------------------------------------------------------------

def test_soft_dice_identity_100_inputs():
    rng = np.random.default_rng(10)
    for _ in range(100):
        p, g = rand_probs(rng, (2, 4, 4, 4)), rand_onehot(rng, (2, 4, 4, 4))
        tl = L.tversky_loss(t64(p), t64(g), 0.5, 0.5)
        ref = np.mean([1 - 2 * (p[i, 1] * g[i, 1]).sum() / (p[i, 1].sum() + g[i, 1].sum()) for i in range(2)])
        assert abs(float(tl[1]) - ref) < 1e-9


def test_tversky_asymmetry_monotonicity():
    # with only missed foreground, alpha scales the penalty; with only spurious foreground, beta does
    g = np.array([[1.0, 1.0, 0.0, 0.0]])
    miss = np.array([[0.6, 0.3, 1e-7, 1e-7]])
    extra = np.array([[1 - 1e-7, 1 - 1e-7, 0.4, 0.2]])

    def tl2(fg, a, b):
        return float(L.tversky_loss(two_channel(fg[0]), two_channel(g[0]), a, b)[1])

    alphas = [0.1, 0.3, 0.5, 0.7, 0.9]
    assert all(x < y for x, y in zip([tl2(miss, a, 0.7) for a in alphas], [tl2(miss, a, 0.7) for a in alphas[1:]]))
    assert all(x < y for x, y in zip([tl2(extra, 0.3, b) for b in alphas], [tl2(extra, 0.3, b) for b in alphas[1:]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ranges_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 4, 4, 4)
    pd, pi, pa = rand_probs(rng, shape), rand_probs(rng, shape), rand_probs(rng, shape)
    lab = rng.choice([0, 1, 2], size=shape, p=[0.6, 0.3, 0.1])
    tg = L.head_targets(lab, torch.float64)
    tl = L.tversky_loss(t64(pd), tg["dentate"])
    assert torch.all((tl >= 0) & (tl <= 1))
    assert torch.all(L.focal_loss(t64(pd), tg["dentate"]) >= 0)
    assert 0 <= float(L.overlap_loss(t64(pd), t64(pi))) <= 1
    assert float(L.attention_loss(t64(pa), tg["union"])) >= 0

    perm = rng.permutation(64)

    def shuffle(a):
        a = np.asarray(a)
        flat = a.reshape(a.shape[:-3] + (64,))
        return flat[..., perm].reshape(a.shape)

    base, _ = L.total_loss(make_output(pd, pi, pa), tg, L.LossConfig(), (0.3, 0.7), (0.1, 0.9))
    tg_s = L.head_targets(shuffle(lab), torch.float64)
    moved, _ = L.total_loss(make_output(shuffle(pd), shuffle(pi), shuffle(pa)), tg_s, L.LossConfig(), (0.3, 0.7), (0.1, 0.9))
    assert abs(float(base) - float(moved)) < 1e-12


# -- gradients ----------------------------------------------------------------

def max_rel_err(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)).max())


def grad_of(fn, x):
    xt = t64(x).requires_grad_(True)
    fn(xt).backward()
    return xt.grad.numpy()


def check_prob_gradient(fn, x):
    analytic = grad_of(fn, x)
    numeric = oracles.central_difference(lambda v: float(fn(t64(v))), x)
    return max_rel_err(analytic, numeric)


GRAD_TOL = 1e-4


@pytest.fixture
def grad_inputs():
    rng = np.random.default_rng(11)
    shape = (2, 4, 4, 4)
    lab = rng.choice([0, 1, 2], size=shape, p=[0.6, 0.3, 0.1])
    return rng, shape, lab, L.head_targets(lab, torch.float64)


def test_tversky_gradient(grad_inputs):
    rng, shape, _, tg = grad_inputs
    p = rand_probs(rng, shape)
    err = check_prob_gradient(lambda t: L.tversky_loss(t, tg["dentate"]).sum(), p)
    assert err < GRAD_TOL


def test_focal_gradient(grad_inputs):
    rng, shape, _, tg = grad_inputs
    err = check_prob_gradient(lambda t: L.focal_loss(t, tg["interposed"]).sum(), rand_probs(rng, shape))
    assert err < GRAD_TOL


def test_hybrid_gradient(grad_inputs):
    rng, shape, _, tg = grad_inputs
    err = check_prob_gradient(lambda t: L.hybrid_loss(t, tg["dentate"], (0.2, 0.8)), rand_probs(rng, shape))
    assert err < GRAD_TOL


def test_attention_gradient(grad_inputs):
    rng, shape, _, tg = grad_inputs
    err = check_prob_gradient(lambda t: L.attention_loss(t, tg["union"]), rand_probs(rng, shape))
    assert err < GRAD_TOL


def test_overlap_gradient(grad_inputs):
    rng, shape, _, _ = grad_inputs
    other = t64(rand_probs(rng, shape))
    err = check_prob_gradient(lambda t: L.overlap_loss(t, other), rand_probs(rng, shape))
    assert err < GRAD_TOL


def total_from_logits(logits, tg):
    """Total loss as a function of stacked (3, B, 2, ...) pre-softmax logits."""
    pd, pi, pa = (torch.softmax(logits[k], 1) for k in range(3))
    total, _ = L.total_loss(ForwardOutput(pd, pi, pa, []), tg, L.LossConfig(), (0.3, 0.7), (0.05, 0.95))
    return total


def test_total_gradient_through_softmax(grad_inputs):
    rng, shape, _, tg = grad_inputs
    logits = rng.normal(0, 1.5, size=(3, shape[0], 2) + shape[1:])
    err = check_prob_gradient(lambda t: total_from_logits(t, tg), logits)
    assert err < GRAD_TOL
