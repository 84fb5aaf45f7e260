import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcpseq import diffmath as dm
from lcpseq import loss
from lcpseq.errors import ContractError, DimensionError, NumericError
from lcpseq.model import GaussianParams
from lcpseq.pose import Motion, rest_pose


def gp(mu, sigma, requires_grad=False):
    return GaussianParams(
        mu=dm.Tensor(np.asarray(mu, dtype=np.float64), requires_grad=requires_grad),
        sigma=dm.Tensor(np.asarray(sigma, dtype=np.float64), requires_grad=requires_grad),
    )


def random_params(rng, d, lo=0.4, hi=2.4):
    mu = rng.uniform(-2.0, 2.0, size=d)
    sigma = rng.uniform(lo, hi, size=d)
    return mu, sigma


# --- closed forms -------------------------------------------------------------

def test_kl_standard_zero_at_prior():
    assert loss.kl_standard(gp([0.0, 0.0], [1.0, 1.0])) == 0.0


def test_kl_standard_unit_shift():
    assert loss.kl_standard(gp([1.0], [1.0])) == pytest.approx(0.5, abs=1e-12)


def test_kl_standard_agrees_with_oracle():
    g = gp([1.0], [1.0])
    est, se = loss.mc_kl_oracle((g.mu.values, g.sigma.values), ([0.0], [1.0]),
                                n=10**6, seed=0)
    assert abs(est - 0.5) <= 3 * se
    assert abs(est - 0.5) <= 0.01 * 0.5


def test_kl_lcp_zero_when_posterior_is_prior():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mu_c, sig_c = random_params(rng, 5)
        g = gp(np.zeros(5), np.ones(5))
        assert abs(loss.kl_lcp(g, gp(mu_c, sig_c))) < 1e-9


def test_kl_lcp_agrees_with_oracle_d8():
    rng = np.random.default_rng(42)
    mu, sigma = random_params(rng, 8)
    mu_c = rng.uniform(-1.0, 1.0, size=8)
    sig_c = rng.uniform(0.7, 1.4, size=8)
    closed = loss.kl_lcp(gp(mu, sigma), gp(mu_c, sig_c))
    est, se = loss.mc_kl_oracle((mu + sigma * mu_c, sigma * sig_c), (mu_c, sig_c),
                                n=10**6, seed=7)
    assert abs(est - closed) <= 3 * se
    assert abs(est - closed) <= 0.01 * closed


def test_kl_nonnegative_random_trials():
    rng = np.random.default_rng(1)
    d = 3
    mu = rng.uniform(-3, 3, size=(10_000, d))
    sigma = rng.uniform(0.05, 4.0, size=(10_000, d))
    s2 = sigma * sigma
    kl_std = 0.5 * (mu * mu + s2 - 1.0 - np.log(s2)).sum(axis=1)
    assert np.all(kl_std >= -1e-12)
    mu_c = rng.uniform(-2, 2, size=(10_000, d))
    sig_c = rng.uniform(0.2, 3.0, size=(10_000, d))
    shift = mu + (sigma - 1.0) * mu_c
    kl_l = 0.5 * (s2 - 1.0 - np.log(s2) + shift * shift / (sig_c * sig_c)).sum(axis=1)
    assert np.all(kl_l >= -1e-12)


def test_kl_rejects_nonfinite():
    with pytest.raises(NumericError):
        loss.kl_standard(gp([np.nan], [1.0]))


def test_kl_lcp_stop_gradient():
    g = gp([0.3, -0.2], [1.2, 0.8], requires_grad=True)
    g_c = gp([0.5, 0.1], [0.9, 1.1], requires_grad=True)
    with dm.Tape():
        out = loss.kl_lcp_t(g, g_c)
    grads = dm.backward(out)
    assert g.mu in grads and g.sigma in grads
    assert g_c.mu not in grads and g_c.sigma not in grads
    assert g_c.mu.grad is None and g_c.sigma.grad is None


def test_tensor_and_float_kl_agree():
    rng = np.random.default_rng(3)
    mu, sigma = random_params(rng, 6)
    mu_c = rng.uniform(-1, 1, size=6)
    sig_c = rng.uniform(0.6, 1.5, size=6)
    g, g_c = gp(mu, sigma), gp(mu_c, sig_c)
    np.testing.assert_allclose(float(loss.kl_standard_t(g).values),
                               loss.kl_standard(g), rtol=1e-12)
    np.testing.assert_allclose(float(loss.kl_lcp_t(g, g_c).values),
                               loss.kl_lcp(g, g_c), rtol=1e-12)


# --- reconstruction -----------------------------------------------------------

def _motion_from(frames):
    return Motion(np.asarray(frames, dtype=np.float64))


def test_recon_identical_is_zero():
    m = _motion_from(np.tile(rest_pose(2), (3, 1, 1)))
    assert loss.recon_mse(m, m) == 0.0


def test_recon_single_joint_offset():
    base = np.tile(rest_pose(2), (3, 1, 1))
    other = base.copy()
    other[1, 0] += 1.0  # all 4 components of one joint off by one
    assert loss.recon_mse(_motion_from(other), _motion_from(base)) == pytest.approx(4.0)


def test_recon_matches_scalar_loop():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(4, 3, 4))
    b = rng.normal(size=(4, 3, 4))
    total = 0.0
    for t in range(4):
        for j in range(3):
            for c in range(4):
                total += (a[t, j, c] - b[t, j, c]) ** 2
    assert loss.recon_mse(_motion_from(a), _motion_from(b)) == pytest.approx(total, abs=1e-9)


def test_recon_shape_mismatch():
    with pytest.raises(DimensionError):
        loss.recon_mse(_motion_from(np.tile(rest_pose(2), (3, 1, 1))),
                       _motion_from(np.tile(rest_pose(2), (4, 1, 1))))


def test_recon_sum_t_matches_loop():
    rng = np.random.default_rng(5)
    raw = [dm.Tensor(rng.normal(size=(2, 8))) for _ in range(3)]
    targets = rng.normal(size=(2, 3, 8))
    got = float(loss.recon_sum_t(raw, targets).values)
    want = np.mean([sum(((raw[t].values[b] - targets[b, t]) ** 2).sum()
                        for t in range(3)) for b in range(2)])
    assert got == pytest.approx(want, rel=1e-12)


# --- annealing ----------------------------------------------------------------

def test_lambda_midpoint():
    sched = loss.AnnealSchedule(midpoint=100, steepness=0.05, saturate_step=400)
    assert loss.anneal_lambda(100, sched) == pytest.approx(0.5)


def test_lambda_exact_clamp():
    sched = loss.AnnealSchedule(midpoint=100, steepness=0.05, saturate_step=400)
    assert loss.anneal_lambda(400, sched) == 1.0
    assert loss.anneal_lambda(12345, sched) == 1.0


def test_lambda_monotone():
    sched = loss.AnnealSchedule()
    vals = [loss.anneal_lambda(s, sched) for s in range(0, 12000, 37)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


# --- total assembly -------------------------------------------------------------

def _motions_pair(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 2, 4))
    return _motion_from(a), _motion_from(a + rng.normal(size=a.shape) * 0.1)


def test_total_loss_lambda_zero():
    po, go = _motions_pair(0)
    pf, gf = _motions_pair(1)
    g_c = gp([0.4], [1.3])
    g_d = gp([0.2], [0.9])
    rep = loss.total_loss(po, go, pf, gf, g_c, g_d, lam=0.0)
    assert rep.total == pytest.approx(rep.rec_cs + rep.rec_lcp, abs=1e-12)


def test_total_loss_identity():
    po, go = _motions_pair(2)
    pf, gf = _motions_pair(3)
    g_c = gp([0.4, -0.3], [1.3, 0.7])
    g_d = gp([0.2, 0.5], [0.9, 1.8])
    rep = loss.total_loss(po, go, pf, gf, g_c, g_d, lam=0.37)
    assert abs(rep.total - (0.37 * (rep.kl_cs + rep.kl_lcp) + rep.rec_cs + rep.rec_lcp)) < 1e-9
    assert rep.kl_cs >= 0 and rep.kl_lcp >= 0


def test_total_loss_perfect_recon_at_lambda_one():
    po, _ = _motions_pair(4)
    pf, _ = _motions_pair(5)
    g_c = gp([0.4], [1.3])
    g_d = gp([0.2], [0.9])
    rep = loss.total_loss(po, po, pf, pf, g_c, g_d, lam=1.0)
    assert rep.total == pytest.approx(rep.kl_cs + rep.kl_lcp, abs=1e-12)


# --- oracle -------------------------------------------------------------------

def test_oracle_requires_min_samples():
    with pytest.raises(ContractError):
        loss.mc_kl_oracle(([0.0], [1.0]), ([0.0], [1.0]), n=100, seed=0)


def test_oracle_identical_distributions():
    est, se = loss.mc_kl_oracle(([0.3, -0.7], [1.2, 0.5]), ([0.3, -0.7], [1.2, 0.5]),
                                n=10**4, seed=1)
    assert abs(est) <= max(3 * se, 1e-12)


def test_oracle_deterministic():
    a = loss.mc_kl_oracle(([0.5], [1.5]), ([0.0], [1.0]), n=10**4, seed=9)
    b = loss.mc_kl_oracle(([0.5], [1.5]), ([0.0], [1.0]), n=10**4, seed=9)
    assert a == b


@settings(deadline=None, max_examples=20)
@given(st.floats(-1.5, 1.5), st.floats(0.5, 2.0))
def test_kl_standard_nonnegative_hypothesis(mu, sigma):
    assert loss.kl_standard(gp([mu], [sigma])) >= -1e-12
