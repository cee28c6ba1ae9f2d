import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfpose import autodiff as ad
from sfpose.autodiff import Tensor
from sfpose.knn import ProductQuantizer, label_distances
from sfpose.pose import Skeleton, default_skeleton, pose_to_orientations, render_gaussian
from sfpose.prior import (PriorConfig, PriorTrainConfig, corrupt, encode, frozen, init_prior, prior_loss,
                          read_labeled, score, score_np, train_prior, vonmises_pdf, write_labeled, load_prior,
                          save_prior)
from sfpose.synth import DomainSpec, sample_aux_poses

SK = default_skeleton()


def _poses(n, seed=0):
    return pose_to_orientations(sample_aux_poses(DomainSpec(), n, seed), SK)


def _i0_series(x, terms=60):
    return sum((x / 2) ** (2 * m) / math.factorial(m) ** 2 for m in range(terms))


# -- Von Mises --------------------------------------------------------------------
def test_i0_and_density_against_power_series():
    assert _i0_series(2.0) == pytest.approx(2.2795853, abs=1e-7)
    for kappa in (0.5, 2.0, 4.0, 8.0):
        assert np.i0(kappa) == pytest.approx(_i0_series(kappa), rel=1e-12)
    assert vonmises_pdf(0.0, 0.0, 2.0) == pytest.approx(np.exp(2) / (2 * np.pi * _i0_series(2.0)), rel=1e-12)
    assert vonmises_pdf(0.0, 0.0, 2.0) == pytest.approx(0.5159, abs=1e-4)


def test_density_integrates_to_one():
    n = np.linspace(-np.pi, np.pi, 20001)
    assert np.trapezoid(vonmises_pdf(n, 0.0, 4.0), n) == pytest.approx(1.0, abs=1e-9)


def test_noise_circular_mean():
    n = np.random.default_rng(0).vonmises(0.0, 4.0, 10_000)
    assert abs(np.angle(np.exp(1j * n).mean())) < 0.05


# -- corruption -------------------------------------------------------------------
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2.0, 4.0, 8.0, None]), st.sampled_from(["componentwise", "angle"]))
def test_corrupt_preserves_unit_norm(seed, kappa, mode):
    theta = _poses(4, seed % 1000)
    out = corrupt(theta, np.random.default_rng(seed), kappa, mode)
    assert out.shape == theta.shape
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-9)


def test_corrupt_concentration_limit():
    theta = _poses(5)
    for mode in ("componentwise", "angle"):
        out = corrupt(theta, np.random.default_rng(1), 1e6, mode)
        assert np.abs(out - theta).max() < 1e-2


def test_corrupt_rejects_unknown_mode():
    with pytest.raises(ValueError):
        corrupt(_poses(1), np.random.default_rng(0), 2.0, "bogus")


def test_kappa_trend_in_labels():
    clean = _poses(1000)
    rng = np.random.default_rng(3)
    means = [label_distances(corrupt(clean[:500], rng, k), clean, exact=True).mean() for k in (2.0, 4.0, 8.0)]
    assert means[0] > means[1] > means[2] > 0


# -- kNN labels ------------------------------------------------------------------------
def test_member_query_labels_zero():
    clean = _poses(50)
    np.testing.assert_array_equal(label_distances(clean[:10], clean, k=5, exact=True), 0.0)


def test_single_pose_set():
    a, b = _poses(2)
    d = label_distances(b[None], a[None], k=1, exact=True)
    assert d[0] == pytest.approx(np.linalg.norm(a - b), rel=1e-14)


def test_small_clean_set_rejected():
    with pytest.raises(ValueError):
        label_distances(_poses(1), _poses(3), k=5)


def _brute(q, c, k):
    q, c = q.reshape(len(q), -1), c.reshape(len(c), -1)
    out = []
    for x in q:
        d = np.sort(np.sqrt(((c - x) ** 2).sum(-1)))
        out.append(0.0 if d[0] == 0 else d[:k].mean())
    return np.array(out)


def test_full_shortlist_equals_brute_force():
    clean = _poses(300)
    q = corrupt(clean[:100], np.random.default_rng(0), None)
    np.testing.assert_array_equal(label_distances(q, clean, k_prime=300, k=5), _brute(q, clean, 5))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_labels_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    clean = _poses(120, seed % 97)
    q = corrupt(clean[:20], rng, 4.0)
    perm = rng.permutation(len(clean))
    a = label_distances(q, clean, exact=True)
    b = label_distances(q, clean[perm], exact=True)
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_pq_shortlist_is_consistent_ranking():
    clean = _poses(400).reshape(400, -1)
    pq = ProductQuantizer(seed=0).fit(clean)
    approx = pq.approx_sq_distances(clean[:5])
    exact = ((clean[:5, None] - clean[None]) ** 2).sum(-1)
    # the true nearest neighbour is ranked in the top tenth by the coarse index
    for i in range(5):
        assert (approx[i] < approx[i, exact[i].argsort()[1]]).sum() < 40


# -- prior network ----------------------------------------------------------------
def test_zero_weight_encoder_gives_biases():
    sk = Skeleton(["a", "b", "c"], [(1, 0), (2, 1)], [-1, 0])
    params = init_prior(PriorConfig(), sk)
    for k, p in params.items():
        if k.startswith("enc"):
            p.data[:] = 0.0
            if k.endswith("1.b"):
                p.data[:] = np.arange(6.0) + 10 * int(k[3])
    theta = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    np.testing.assert_array_equal(encode(params, theta, sk).data[0], np.r_[np.arange(6.0), np.arange(6.0) + 10])


def test_sibling_permutation_consistency():
    # swap the two hip bones (1 and 2, both children of the pelvis) together with their subtrees
    perm = [0, 2, 1, 3, 6, 7, 4, 5, 10, 11, 8, 9]
    inv = np.argsort(perm)
    bones = [SK.bones[perm[l]] for l in range(SK.L)]
    parents = [-1 if SK.parents[perm[l]] < 0 else int(inv[SK.parents[perm[l]]]) for l in range(SK.L)]
    sk2 = Skeleton(SK.names, bones, parents, SK.groups)
    params = init_prior(PriorConfig(), SK, seed=4)
    params2 = dict(params)
    for l in range(SK.L):
        for suffix in ("0.w", "0.b", "1.w", "1.b"):
            params2[f"enc{l}.{suffix}"] = params[f"enc{perm[l]}.{suffix}"]
    theta = _poses(3)
    p1 = encode(params, theta, SK).data.reshape(3, SK.L, 6)
    p2 = encode(params2, theta[:, perm], sk2).data.reshape(3, SK.L, 6)
    np.testing.assert_array_equal(p2, p1[:, perm])


def test_encode_rejects_non_unit():
    params = init_prior(PriorConfig(), SK)
    with pytest.raises(ValueError):
        encode(params, _poses(1) * 1.01, SK)


def test_encode_gradient():
    params = frozen(init_prior(PriorConfig(), SK, seed=1))
    w = np.random.default_rng(0).normal(size=(2, SK.L * 6))
    rng = np.random.default_rng(5)
    for i in range(10):
        coords = sample_aux_poses(DomainSpec(), 2, i)
        # differentiate through the unit-vector map so perturbations stay admissible
        f = lambda c: (encode(params, pose_to_orientations(c, SK), SK) * w).sum()
        assert ad.grad_check(f, coords + rng.normal(0, 0.01, coords.shape)) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_score_non_negative_on_random_inputs(seed):
    rng = np.random.default_rng(seed)
    params = init_prior(PriorConfig(), SK, seed % 7)
    v = rng.normal(size=(16, SK.L, 2)) * 10
    theta = v / np.linalg.norm(v, axis=-1, keepdims=True)
    s = score_np(params, theta, SK)
    assert np.isfinite(s).all() and (s >= 0).all()


def test_score_scale_free():
    params = init_prior(PriorConfig(), SK)
    coords = sample_aux_poses(DomainSpec(), 4, 0)
    a = score_np(params, pose_to_orientations(coords, SK), SK)
    b = score_np(params, pose_to_orientations(coords * 3.7 + 5, SK), SK)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_single_pose_memorised():
    one = np.repeat(_poses(1), 200, axis=0)
    tcfg = PriorTrainConfig(epochs=30, batch_size=64, exact_knn=True, lr_drops=[25], corrupt_per_pose=1)
    params, trace, _ = train_prior(one, SK, tcfg=tcfg)
    assert score_np(params, one[:1], SK)[0] < 1e-2
    assert np.isfinite(trace).all() and trace[-1] < trace[0]


def test_labeled_cache_roundtrip(tmp_path):
    theta, d = _poses(7), np.linspace(0, 1, 7)
    write_labeled(tmp_path / "l.bin", theta, d)
    t2, d2 = read_labeled(tmp_path / "l.bin")
    np.testing.assert_array_equal(t2, theta)
    np.testing.assert_array_equal(d2, d)
    assert (tmp_path / "l.bin").stat().st_size == 24 + 7 * (SK.L * 2 + 1) * 8


def test_prior_checkpoint_roundtrip(tmp_path):
    params = init_prior(PriorConfig(), SK, 2)
    save_prior(tmp_path / "p.ckpt", params, PriorConfig(), SK)
    p2, cfg, sk, _ = load_prior(tmp_path / "p.ckpt")
    assert cfg == PriorConfig() and sk.to_dict() == SK.to_dict()
    theta = _poses(3)
    np.testing.assert_array_equal(score_np(p2, theta, SK), score_np(params, theta, SK))


# -- regulariser ----------------------------------------------------------------
def _heatmaps(n=2, seed=0):
    coords = sample_aux_poses(DomainSpec(), n, seed)
    maps, _ = render_gaussian((coords - 1.5) / 4.0, 1.0, 16, 16)
    return maps


def test_prior_loss_zero_for_zero_scoring_prior():
    params = frozen(init_prior(PriorConfig(), SK))
    params["dec.4.b"].data[:] = -60.0
    params["dec.4.w"].data[:] = 0.0
    assert prior_loss(Tensor(_heatmaps()), params, SK).item() < 1e-20


def test_prior_loss_identical_batch_equals_single():
    params = frozen(init_prior(PriorConfig(), SK, 3))
    h = _heatmaps(1)
    single = prior_loss(Tensor(h), params, SK).item()
    batch = prior_loss(Tensor(np.repeat(h, 4, axis=0)), params, SK).item()
    assert batch == pytest.approx(single, rel=1e-12)


def test_prior_loss_gradient_and_frozen_params():
    params = frozen(init_prior(PriorConfig(), SK, 3))
    rng = np.random.default_rng(0)
    for i in range(10):
        h = _heatmaps(2, i) + rng.normal(0, 0.05, (2, 13, 16, 16))
        assert ad.grad_check(lambda m: prior_loss(m, params, SK), h) < 1e-4
    t = Tensor(_heatmaps(), requires_grad=True)
    prior_loss(t, params, SK).backward()
    assert t.grad is not None and all(p.grad is None for p in params.values())


def test_prior_loss_drops_degenerate_samples():
    params = frozen(init_prior(PriorConfig(), SK, 3))
    h = _heatmaps(2)
    h[1] = 0.0                       # every keypoint collapses to the same soft-argmax point
    stats = {}
    both = prior_loss(Tensor(h), params, SK, stats=stats).item()
    assert stats["degenerate"] == 1
    assert both == pytest.approx(prior_loss(Tensor(h[:1]), params, SK).item() / 2, rel=1e-12)
