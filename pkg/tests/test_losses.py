import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from phgmm.latent import GaussianParams, MixtureParams
from phgmm.losses import (
    LossWeights,
    TrainingDivergenceError,
    kl_gaussian_pair,
    kl_gaussian_standard,
    kl_mixture_matched,
    kl_mixture_mc,
    seg_loss,
    total_loss,
)

D64 = torch.float64


def gp(mean, log_std):
    return GaussianParams(torch.tensor(mean, dtype=D64), torch.tensor(log_std, dtype=D64))


def quad_kl_1d(mq, sq, mp, sp):
    """KL(N(mq, sq^2) || N(mp, sp^2)) by adaptive quadrature of q log(q/p)."""
    lo, hi = mq - 12 * sq, mq + 12 * sq

    def f(z):
        lq = stats.norm.logpdf(z, mq, sq)
        return math.exp(lq) * (lq - stats.norm.logpdf(z, mp, sp))

    val, _ = integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def quad_kl(q: GaussianParams, p: GaussianParams):
    # diagonal Gaussians factor over dimensions
    return sum(
        quad_kl_1d(float(a), math.exp(float(b)), float(c), math.exp(float(d)))
        for a, b, c, d in zip(q.mean, q.log_std, p.mean, p.log_std)
    )


def random_mixture(rng, K, D, spread=1.0):
    return MixtureParams(
        torch.tensor(rng.normal(scale=spread, size=(K, D)), dtype=D64),
        torch.tensor(rng.uniform(-1, 0.7, size=(K, D)), dtype=D64),
        torch.tensor(rng.normal(size=K), dtype=D64),
    )


# gaussian KLs ---------------------------------------------------------------


def test_kl_standard_zero_at_prior():
    assert float(kl_gaussian_standard(gp([0.0, 0.0], [0.0, 0.0]))) == 0.0


def test_kl_standard_unit_shift():
    q = gp([1.0], [0.0])
    assert float(kl_gaussian_standard(q)) == pytest.approx(0.5, abs=1e-12)
    assert quad_kl(q, gp([0.0], [0.0])) == pytest.approx(0.5, abs=1e-9)


def test_kl_pair_shift_by_two():
    q, p = gp([0.0], [0.0]), gp([2.0], [0.0])
    assert float(kl_gaussian_pair(q, p)) == pytest.approx(2.0, abs=1e-12)
    assert quad_kl(q, p) == pytest.approx(2.0, abs=1e-9)


def test_kl_pair_identity_and_asymmetry():
    q, p = gp([0.3, -1.0], [0.2, -0.5]), gp([1.0, 0.5], [-0.3, 0.4])
    assert float(kl_gaussian_pair(q, q)) == 0.0
    assert float(kl_gaussian_pair(q, p)) != pytest.approx(float(kl_gaussian_pair(p, q)))


def test_kl_pair_dim_mismatch():
    with pytest.raises(ValueError):
        kl_gaussian_pair(gp([0.0], [0.0]), gp([0.0, 1.0], [0.0, 0.0]))


@pytest.mark.parametrize("seed", range(10))
def test_kl_closed_forms_match_quadrature(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    q = gp(rng.normal(size=d).tolist(), rng.uniform(-1.5, 1.0, d).tolist())
    p = gp(rng.normal(size=d).tolist(), rng.uniform(-1.5, 1.0, d).tolist())
    assert float(kl_gaussian_pair(q, p)) == pytest.approx(quad_kl(q, p), abs=1e-6)
    assert float(kl_gaussian_standard(q)) == pytest.approx(quad_kl(q, gp([0.0] * d, [0.0] * d)), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_kls_nonnegative(seed):
    rng = np.random.default_rng(seed)
    K, D = int(rng.integers(1, 4)), int(rng.integers(1, 6))
    q, p = random_mixture(rng, K, D, 2.0), random_mixture(rng, K, D, 2.0)
    assert float(kl_gaussian_standard(q.component(0))) >= 0
    assert float(kl_gaussian_pair(q.component(0), p.component(0))) >= 0
    assert float(kl_mixture_matched(q, p)) >= -1e-12


def test_batched_kl_shapes():
    rng = np.random.default_rng(0)
    means = torch.tensor(rng.normal(size=(5, 3, 4)))
    mp = MixtureParams(means, torch.zeros_like(means), torch.zeros(5, 3, dtype=D64))
    assert kl_mixture_matched(mp, mp).shape == (5,)
    assert kl_gaussian_standard(mp.component(1)).shape == (5,)


# mixture KL ----------------------------------------------------------------------


def test_matched_identity_is_zero():
    rng = np.random.default_rng(1)
    q = random_mixture(rng, 3, 4)
    assert float(kl_mixture_matched(q, q)) == pytest.approx(0.0, abs=1e-12)


def test_matched_single_component_reduces_to_pair():
    rng = np.random.default_rng(2)
    q, p = random_mixture(rng, 1, 3), random_mixture(rng, 1, 3)
    assert float(kl_mixture_matched(q, p)) == pytest.approx(
        float(kl_gaussian_pair(q.component(0), p.component(0))), abs=1e-12
    )


def test_matched_component_mismatch():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        kl_mixture_matched(random_mixture(rng, 2, 3), random_mixture(rng, 3, 3))


def test_matched_weight_floor():
    q = MixtureParams(torch.zeros(2, 1, dtype=D64), torch.zeros(2, 1, dtype=D64), torch.tensor([0.0, 0.0], dtype=D64))
    p = MixtureParams(torch.zeros(2, 1, dtype=D64), torch.zeros(2, 1, dtype=D64), torch.tensor([0.0, -100.0], dtype=D64))
    # second p weight ~ e^-100 is floored at 1e-8
    expected = 0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / 1e-8)
    assert float(kl_mixture_matched(q, p)) == pytest.approx(expected, rel=1e-9)


def test_mc_identity_within_error():
    rng = np.random.default_rng(4)
    q = random_mixture(rng, 3, 2)
    est, se = kl_mixture_mc(q, q, 2000, seed=0)
    assert abs(est) <= 3 * se + 1e-12


def test_mc_single_component_matches_closed_form():
    rng = np.random.default_rng(5)
    q, p = random_mixture(rng, 1, 3), random_mixture(rng, 1, 3)
    est, se = kl_mixture_mc(q, p, 50_000, seed=1)
    exact = float(kl_gaussian_pair(q.component(0), p.component(0)))
    assert abs(est - exact) <= 3 * se


def test_mc_no_nan_at_clamp_limits():
    q = MixtureParams(torch.zeros(2, 2, dtype=D64), torch.full((2, 2), -7.0, dtype=D64), torch.zeros(2, dtype=D64))
    p = MixtureParams(torch.full((2, 2), 3.0, dtype=D64), torch.full((2, 2), 7.0, dtype=D64), torch.zeros(2, dtype=D64))
    est, se = kl_mixture_mc(q, p, 1000, seed=0)
    assert math.isfinite(est) and math.isfinite(se)
    est, se = kl_mixture_mc(p, q, 1000, seed=0)
    assert math.isfinite(est) and math.isfinite(se)


@pytest.mark.parametrize("seed", range(5))
def test_matched_bounds_mc(seed):
    rng = np.random.default_rng(50 + seed)
    K, D = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    q, p = random_mixture(rng, K, D), random_mixture(rng, K, D)
    est, se = kl_mixture_mc(q, p, 50_000, seed=seed)
    assert float(kl_mixture_matched(q, p)) >= est - 3 * se


def test_mixture_kl_gradients_finite_difference():
    rng = np.random.default_rng(6)
    q, p = random_mixture(rng, 2, 3), random_mixture(rng, 2, 3)
    leaves = [t.clone().requires_grad_(True) for t in (q.means, q.log_stds, q.logits, p.means, p.log_stds, p.logits)]
    f = lambda *a: kl_mixture_matched(MixtureParams(*a[:3]), MixtureParams(*a[3:]))
    assert torch.autograd.gradcheck(f, leaves, eps=1e-6, atol=1e-8, rtol=1e-5)
    g = lambda m, s, m2, s2: kl_gaussian_pair(GaussianParams(m, s), GaussianParams(m2, s2))
    assert torch.autograd.gradcheck(g, [leaves[0], leaves[1], leaves[3], leaves[4]], eps=1e-6, atol=1e-8)
    assert torch.autograd.gradcheck(lambda m, s: kl_gaussian_standard(GaussianParams(m, s)), leaves[:2], eps=1e-6)


# segmentation loss ----------------------------------------------------------------


def brute_seg_loss(probs, mask, C, ignore=255):
    """Explicit per-pixel accumulation for a single (C, H, W) prediction."""
    _, H, W = probs.shape
    ce, n = 0.0, 0
    inter = [0.0] * C
    union = [0.0] * C
    present = [False] * C
    for i in range(H):
        for j in range(W):
            g = int(mask[i, j])
            if g == ignore:
                continue
            n += 1
            ce -= math.log(float(probs[g, i, j]))
            present[g] = True
            for c in range(C):
                pc, yc = float(probs[c, i, j]), float(c == g)
                inter[c] += pc * yc
                union[c] += pc + yc - pc * yc
    ce = ce / n if n else 0.0
    ious = [inter[c] / (union[c] + 1e-6) for c in range(C) if present[c]]
    return ce + 1 - (sum(ious) / len(ious) if ious else 0.0)


def test_seg_loss_perfect_prediction():
    mask = torch.tensor([[0, 1, 2], [2, 1, 0]])
    probs = torch.nn.functional.one_hot(mask, 3).permute(2, 0, 1).to(D64)
    assert float(seg_loss(probs, mask, 3)) == pytest.approx(0.0, abs=1e-6)


def test_seg_loss_uniform_two_class_half_split():
    mask = torch.tensor([[0, 0, 1, 1]] * 4)
    probs = torch.full((2, 4, 4), 0.5, dtype=D64)
    got = float(seg_loss(probs, mask, 2))
    # I = N/4, U = 3N/4 per class
    assert got == pytest.approx(math.log(2) + 1 - 1 / 3, abs=1e-6)
    assert got == pytest.approx(brute_seg_loss(probs, mask, 2), abs=1e-12)


def test_seg_loss_all_ignore_is_one():
    mask = torch.full((4, 4), 255)
    probs = torch.full((3, 4, 4), 1 / 3, dtype=D64)
    assert float(seg_loss(probs, mask, 3)) == 1.0


def test_seg_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        seg_loss(torch.full((2, 2, 2), 0.5), torch.tensor([[0, 2], [1, 0]]), 2)


@pytest.mark.parametrize("seed", range(8))
def test_seg_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 5))
    H, W = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    probs = torch.softmax(torch.tensor(rng.normal(size=(C, H, W))), 0)
    mask = torch.tensor(rng.integers(0, C, (H, W)))
    mask[torch.tensor(rng.random((H, W)) < 0.2)] = 255
    assert float(seg_loss(probs, mask, C)) == pytest.approx(brute_seg_loss(probs, mask, C), abs=1e-12)


def test_seg_loss_log_probs_path_agrees():
    rng = np.random.default_rng(9)
    logits = torch.tensor(rng.normal(size=(2, 3, 5, 5)))
    mask = torch.tensor(rng.integers(0, 3, (2, 5, 5)))
    a = seg_loss(torch.softmax(logits, 1), mask, 3)
    b = seg_loss(torch.softmax(logits, 1), mask, 3, log_probs=torch.log_softmax(logits, 1))
    assert float(a) == pytest.approx(float(b), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_seg_loss_nonnegative_and_positive_when_wrong(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 4))
    probs = torch.softmax(torch.tensor(rng.normal(size=(C, 4, 4))), 0)
    mask = torch.tensor(rng.integers(0, C, (4, 4)))
    assert float(seg_loss(probs, mask, C)) > 0


def test_seg_loss_gradient_finite_difference():
    rng = np.random.default_rng(10)
    probs = torch.softmax(torch.tensor(rng.normal(size=(3, 4, 4))), 0).requires_grad_(True)
    mask = torch.tensor(rng.integers(0, 3, (4, 4)))
    mask[0, 0] = 255
    assert torch.autograd.gradcheck(lambda p: seg_loss(p, mask, 3), [probs], eps=1e-6, atol=1e-8)


# total -------------------------------------------------------------------------------


def test_total_loss_combinations():
    t = lambda v: torch.tensor(float(v))
    assert float(total_loss(t(1), t(2), t(3), LossWeights(1, 1, 1)).total) == 6
    x = 2.5
    assert float(total_loss(t(0), t(0), t(x), LossWeights()).total) == pytest.approx(0.4 * x)
    assert float(total_loss(t(1), t(2), t(3), LossWeights(0, 0, 0)).total) == 0


def test_default_weights_values():
    w = LossWeights()
    assert (w.g, w.z, w.s) == (1.1, 0.4, 0.4)


def test_total_loss_nan_names_term():
    with pytest.raises(TrainingDivergenceError) as info:
        total_loss(torch.tensor(0.0), torch.tensor(float("nan")), torch.tensor(0.0), LossWeights())
    assert info.value.term == "l_z"


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)
