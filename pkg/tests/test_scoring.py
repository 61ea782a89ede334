import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oodkit.calibration import (
    ClassifierHead,
    DiceMask,
    GaussianStats,
    PosteriorTemplates,
    VimSubspace,
    WeibullTails,
    fit_dice_mask,
    fit_gaussian,
    fit_templates,
    fit_vim,
)
from oodkit.scoring import (
    ScoringError,
    logits_from_features,
    score_dice,
    score_energy,
    score_kl_matching,
    score_mahalanobis,
    score_maxlogit,
    score_msp,
    score_odin,
    score_openmax,
    score_react,
    score_vim,
)


# independent straight-line helpers, no shared code with the implementation


def brute_softmax(z):
    e = [math.exp(v - max(z)) for v in z]
    s = sum(e)
    return [v / s for v in e]


def brute_logsumexp(z):
    m = max(z)
    return m + math.log(sum(math.exp(v - m) for v in z))


# --- msp / odin / maxlogit / energy -----------------------------------------------


def test_msp_uniform():
    assert score_msp(np.array([[0.0, 0.0]])).scores[0] == pytest.approx(0.5)


def test_msp_analytic():
    s = score_msp(np.array([[math.log(3), 0.0]]))
    assert s.scores[0] == pytest.approx(0.75, abs=1e-12)


def test_msp_matches_bruteforce():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((50, 7)) * 5
    got = score_msp(Z).scores
    want = [max(brute_softmax(list(row))) for row in Z]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_odin_analytic():
    s = score_odin(np.array([[1000.0, 0.0]]), T=1000.0)
    assert s.scores[0] == pytest.approx(math.e / (1 + math.e), abs=1e-9)


def test_odin_t1_equals_msp_exactly():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((100, 5)) * 10
    np.testing.assert_array_equal(score_odin(Z, T=1.0).scores,
                                  score_msp(Z).scores)


def test_odin_uniform_three_way():
    assert score_odin(np.array([[0.0, 0.0, 0.0]]), T=17.0).scores[0] == \
        pytest.approx(1 / 3)


def test_maxlogit_trivial():
    assert score_maxlogit(np.array([[3.0, 1.0, 2.0]])).scores[0] == 3.0
    assert score_maxlogit(np.array([[-5.0]])).scores[0] == -5.0


def test_maxlogit_matches_bruteforce():
    rng = np.random.default_rng(2)
    Z = rng.standard_normal((40, 6))
    np.testing.assert_array_equal(score_maxlogit(Z).scores, Z.max(axis=1))


def test_energy_analytic():
    assert score_energy(np.array([[0.0, 0.0]])).scores[0] == \
        pytest.approx(math.log(2), abs=1e-12)
    assert score_energy(np.array([[10.0, 0.0]])).scores[0] == \
        pytest.approx(10 + math.log(1 + math.exp(-10)), abs=1e-12)


def test_energy_matches_high_precision_reference():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((20, 101)) * 10
    got = score_energy(Z).scores
    # reference accumulated in extended precision
    import mpmath
    mpmath.mp.prec = 128
    want = [float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row)))
            for row in Z]
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_energy_shift_identity_and_msp_invariance():
    rng = np.random.default_rng(4)
    Z = rng.standard_normal((30, 4))
    c = 3.7
    np.testing.assert_allclose(score_energy(Z + c).scores,
                               score_energy(Z).scores + c, atol=1e-12)
    np.testing.assert_allclose(score_msp(Z + c).scores, score_msp(Z).scores,
                               atol=1e-12)


# --- kl matching -------------------------------------------------------------------


def test_kl_exact_template_match_scores_zero():
    q = np.array([[0.75, 0.25], [0.25, 0.75]])
    t = PosteriorTemplates(q=q, epsilon_clamp=1e-12, group_by="predicted")
    z = np.log(q[0])[None, :]  # softmax(z) == q[0]
    assert score_kl_matching(z, t).scores[0] == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_computed():
    q = np.array([[0.75, 0.25], [0.25, 0.75]])
    t = PosteriorTemplates(q=q, epsilon_clamp=1e-12, group_by="predicted")
    z = np.zeros((1, 2))  # posterior (0.5, 0.5)
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert score_kl_matching(z, t).scores[0] == pytest.approx(-expected, abs=1e-12)
    assert expected == pytest.approx(0.143841, abs=1e-6)


def test_kl_matches_bruteforce():
    rng = np.random.default_rng(5)
    Z_train = rng.standard_normal((200, 3)) * 3
    t = fit_templates(Z_train)
    Z = rng.standard_normal((40, 3)) * 3
    got = score_kl_matching(Z, t).scores
    want = []
    for row in Z:
        p = brute_softmax(list(row))
        kls = []
        for c in range(3):
            kl = sum(pi * math.log(pi / t.q[c][i]) for i, pi in enumerate(p) if pi > 0)
            kls.append(kl)
        want.append(-min(kls))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_kl_never_positive():
    rng = np.random.default_rng(6)
    t = fit_templates(rng.standard_normal((100, 4)))
    s = score_kl_matching(rng.standard_normal((50, 4)) * 8, t)
    assert (s.scores <= 1e-15).all()


# --- mahalanobis ---------------------------------------------------------------------


def unit_gaussian_stats():
    mu = np.array([[0.0, 0.0], [4.0, 0.0]])
    eye = np.eye(2)
    return GaussianStats(mu=mu, sigma=eye, sigma_inv=eye, shrinkage=0.0)


def test_mahalanobis_at_mean_is_zero():
    s = score_mahalanobis(np.array([[0.0, 0.0]]), unit_gaussian_stats())
    assert s.scores[0] == 0.0


def test_mahalanobis_equidistant():
    s = score_mahalanobis(np.array([[2.0, 0.0]]), unit_gaussian_stats())
    assert s.scores[0] == pytest.approx(-4.0, abs=1e-12)


def test_mahalanobis_matches_quadratic_form_oracle():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((5, 5))
    sigma = A @ A.T + 5 * np.eye(5)
    sigma_inv = np.linalg.inv(sigma)
    mu = rng.standard_normal((3, 5)) * 2
    stats = GaussianStats(mu=mu, sigma=sigma, sigma_inv=sigma_inv, shrinkage=0.0)
    X = rng.standard_normal((30, 5)) * 3
    got = score_mahalanobis(X, stats).scores
    want = []
    for x in X:
        best = -np.inf
        for c in range(3):
            dev = x - mu[c]
            best = max(best, -float(dev @ sigma_inv @ dev))
        want.append(best)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_mahalanobis_never_positive():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((400, 4))
    y = rng.integers(0, 3, 400)
    stats = fit_gaussian(X, y)
    s = score_mahalanobis(rng.standard_normal((100, 4)) * 5, stats)
    assert (s.scores <= 0).all()


# --- openmax -------------------------------------------------------------------------


def make_tails(rng, C, d):
    return WeibullTails(
        scale=rng.uniform(1.0, 3.0, C),
        shape=rng.uniform(0.8, 3.0, C),
        mav=rng.standard_normal((C, d)) * 2,
        eta=20,
        tail_counts=np.full(C, 20),
    )


def test_openmax_no_revision_when_cdf_zero():
    # tiny shapes make the CDF effectively zero at reachable distances
    C, d = 3, 4
    tails = WeibullTails(scale=np.full(C, 1e9), shape=np.full(C, 8.0),
                         mav=np.zeros((C, d)), eta=20, tail_counts=np.full(C, 20))
    Z = np.array([[2.0, 1.0, 0.0]])
    X = np.ones((1, d))
    got = score_openmax(Z, X, tails, alpha_top=C).scores[0]
    want = max(brute_softmax([2.0, 1.0, 0.0, 0.0]))  # unknown logit 0
    assert got == pytest.approx(want, abs=1e-12)


def test_openmax_full_revision_all_cdf_one_no_rank_weight():
    C, d = 3, 2
    # huge shape, tiny scale: any positive distance has CDF 1
    tails = WeibullTails(scale=np.full(C, 1e-9), shape=np.full(C, 50.0),
                         mav=np.zeros((C, d)), eta=20, tail_counts=np.full(C, 20))
    Z = np.array([[3.0, 2.0, 1.0]])
    X = np.ones((1, d))
    got = score_openmax(Z, X, tails, alpha_top=C, rank_weight=False).scores[0]
    # z' = 0 for every class, unknown = sum(z)
    want = max(brute_softmax([0.0, 0.0, 0.0, 6.0])[:3])
    assert got == pytest.approx(want, abs=1e-12)


def test_openmax_matches_transcription_oracle():
    rng = np.random.default_rng(9)
    C, d, N = 4, 6, 25
    tails = make_tails(rng, C, d)
    Z = rng.standard_normal((N, C)) * 3
    X = rng.standard_normal((N, d)) * 2
    alpha_top = 3
    got = score_openmax(Z, X, tails, alpha_top=alpha_top).scores

    want = []
    for n in range(N):
        z = list(Z[n])
        w = []
        for c in range(C):
            dist = math.dist(X[n], tails.mav[c])
            w.append(1.0 - math.exp(-((dist / tails.scale[c]) ** tails.shape[c])))
        ranked = sorted(range(C), key=lambda c: -z[c])[:alpha_top]
        z_prime = list(z)
        unknown = 0.0
        for r, c in enumerate(ranked, start=1):
            factor = (alpha_top - r + 1) / alpha_top
            z_prime[c] = z[c] * (1 - w[c] * factor)
            unknown += z[c] * w[c] * factor
        probs = brute_softmax(z_prime + [unknown])
        want.append(max(probs[:C]))
    np.testing.assert_allclose(got, want, atol=1e-12)


# --- vim ------------------------------------------------------------------------------


def test_vim_single_class_zero_residual():
    sub = VimSubspace(offset=np.zeros(2), residual_basis=np.eye(2)[:, 1:],
                      alpha=1.0, principal_dim=1)
    Z = np.array([[0.0]])
    X = np.array([[5.0, 0.0]])  # residual component (dim 1) is zero
    s = score_vim(Z, X, sub)
    assert s.scores[0] == pytest.approx(-0.5, abs=1e-12)


def test_vim_limit_large_residual():
    sub = VimSubspace(offset=np.zeros(2), residual_basis=np.eye(2)[:, 1:],
                      alpha=1.0, principal_dim=1)
    Z = np.array([[0.0]])
    X = np.array([[0.0, 200.0]])
    assert score_vim(Z, X, sub).scores[0] == pytest.approx(-1.0, abs=1e-12)


def test_vim_matches_extended_softmax_oracle():
    rng = np.random.default_rng(10)
    d, C, N = 16, 5, 30
    head = ClassifierHead(W=rng.standard_normal((C, d)),
                          b=rng.standard_normal(C))
    X_train = rng.standard_normal((800, d))
    sub = fit_vim(X_train, head, principal_dim=8)
    X = rng.standard_normal((N, d)) * 2
    Z = logits_from_features(X, head)
    got = score_vim(Z, X, sub).scores
    want = []
    for n in range(N):
        xt = X[n] - sub.offset
        l0 = sub.alpha * math.sqrt(sum(
            float(xt @ sub.residual_basis[:, j]) ** 2
            for j in range(sub.residual_basis.shape[1])))
        probs = brute_softmax(list(Z[n]) + [l0])
        want.append(-probs[-1])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_vim_strictly_increasing_in_residual():
    sub = VimSubspace(offset=np.zeros(3), residual_basis=np.eye(3)[:, 2:],
                      alpha=2.0, principal_dim=2)
    Z = np.tile([1.0, 0.5], (5, 1))
    X = np.zeros((5, 3))
    X[:, 2] = [0.0, 0.5, 1.0, 2.0, 4.0]
    s = score_vim(Z, X, sub).scores
    assert (np.diff(s) < 0).all()  # more residual, more OOD, lower score


# --- react / dice -----------------------------------------------------------------------


def test_react_infinite_tau_equals_energy():
    rng = np.random.default_rng(11)
    head = ClassifierHead(W=rng.standard_normal((4, 6)), b=rng.standard_normal(4))
    X = rng.standard_normal((40, 6))
    got = score_react(X, head, tau=np.inf).scores
    want = score_energy(logits_from_features(X, head)).scores
    np.testing.assert_array_equal(got, want)


def test_react_saturation():
    rng = np.random.default_rng(12)
    head = ClassifierHead(W=rng.standard_normal((3, 4)), b=rng.standard_normal(3))
    X = rng.uniform(5.0, 9.0, (10, 4))  # everything above tau
    s = score_react(X, head, tau=1.0).scores
    np.testing.assert_allclose(s, s[0], atol=1e-12)


def test_react_matches_clip_oracle():
    rng = np.random.default_rng(13)
    head = ClassifierHead(W=rng.standard_normal((5, 8)), b=rng.standard_normal(5))
    X = rng.standard_normal((30, 8))
    tau = float(np.median(X))
    got = score_react(X, head, tau=tau).scores
    want = []
    for x in X:
        clipped = [min(v, tau) for v in x]
        z = [sum(head.W[c][j] * clipped[j] for j in range(8)) + head.b[c]
             for c in range(5)]
        want.append(brute_logsumexp(z))
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_dice_rho_zero_equals_energy():
    rng = np.random.default_rng(14)
    head = ClassifierHead(W=rng.standard_normal((4, 6)), b=rng.standard_normal(4))
    X = rng.standard_normal((25, 6))
    mask = fit_dice_mask(X, head, 0.0)
    got = score_dice(X, head, mask).scores
    want = score_energy(logits_from_features(X, head)).scores
    np.testing.assert_array_equal(got, want)


def test_dice_rho_one_constant():
    rng = np.random.default_rng(15)
    head = ClassifierHead(W=rng.standard_normal((4, 6)), b=rng.standard_normal(4))
    X = rng.standard_normal((25, 6))
    mask = fit_dice_mask(X, head, 1.0)
    s = score_dice(X, head, mask).scores
    np.testing.assert_allclose(s, brute_logsumexp(list(head.b)), atol=1e-12)


def test_dice_matches_masked_matmul_oracle():
    rng = np.random.default_rng(16)
    head = ClassifierHead(W=rng.standard_normal((5, 10)), b=rng.standard_normal(5))
    X = rng.standard_normal((20, 10))
    mask = fit_dice_mask(X, head, 0.5)
    got = score_dice(X, head, mask).scores
    want = []
    for x in X:
        z = []
        for c in range(5):
            acc = head.b[c]
            for j in range(10):
                if mask.mask[c][j]:
                    acc += head.W[c][j] * x[j]
            z.append(acc)
        want.append(brute_logsumexp(z))
    np.testing.assert_allclose(got, want, atol=1e-10)


# --- shared contracts -----------------------------------------------------------------


def test_logits_from_features_identities():
    rng = np.random.default_rng(17)
    head = ClassifierHead(W=np.eye(4), b=np.zeros(4))
    X = rng.standard_normal((10, 4))
    np.testing.assert_array_equal(logits_from_features(X, head), X)
    head2 = ClassifierHead(W=rng.standard_normal((3, 4)), b=rng.standard_normal(3))
    np.testing.assert_array_equal(
        logits_from_features(np.zeros((5, 4)), head2), np.tile(head2.b, (5, 1)))


def test_non_finite_input_rejected_with_row():
    Z = np.zeros((4, 3))
    Z[2, 1] = np.nan
    with pytest.raises(ScoringError, match="row 2"):
        score_msp(Z)
    X = np.zeros((3, 2))
    X[1, 0] = np.inf
    with pytest.raises(ScoringError, match="row 1"):
        score_mahalanobis(X, unit_gaussian_stats())


def test_dimension_mismatch_rejected():
    with pytest.raises(ScoringError, match="width"):
        score_mahalanobis(np.zeros((3, 5)), unit_gaussian_stats())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(-50, 50))
def test_argmax_invariance_under_shift_and_temperature(seed, c):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((8, 5))
    base = np.argmax(Z, axis=1)
    np.testing.assert_array_equal(np.argmax(Z + c, axis=1), base)
    for T in (0.01, 1.0, 250.0):
        from scipy.special import softmax as sm
        np.testing.assert_array_equal(np.argmax(sm(Z / T, axis=1), axis=1), base)


def test_row_permutation_equivariance():
    rng = np.random.default_rng(18)
    X = rng.standard_normal((400, 4))
    y = rng.integers(0, 3, 400)
    stats = fit_gaussian(X, y)
    Q = rng.standard_normal((20, 4))
    perm = rng.permutation(20)
    s = score_mahalanobis(Q, stats).scores
    s_perm = score_mahalanobis(Q[perm], stats).scores
    np.testing.assert_array_equal(s_perm, s[perm])
