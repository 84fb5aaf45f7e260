"""Training objectives: two KL penalties, reconstruction sums, the annealed
total, and a Monte-Carlo KL estimator used as a validation oracle.

Conventions. Reconstruction is a plain sum of squared differences within a
sample; batched paths average that sum over the batch. kl_lcp measures the
divergence of the future posterior, pushed through the extended
reparameterization, from the condition posterior N(mu_c, diag sigma_c^2):

    KL( N(mu + sigma*mu_c, diag(sigma*sigma_c)^2) || N(mu_c, diag sigma_c^2) )
      = 1/2 * sum_j [ sigma_j^2 - 1 - log sigma_j^2
                      + (mu_j + (sigma_j - 1) mu_cj)^2 / sigma_cj^2 ]

Gradients of kl_lcp flow into (mu, sigma) only; (mu_c, sigma_c) are
constants inside it, which is what keeps the condition posterior frozen
with respect to this term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .errors import ContractError, DimensionError, NumericError
from .pose import Motion


@dataclass(frozen=True)
class AnnealSchedule:
    midpoint: float = 2500.0
    steepness: float = 1.0 / 250.0
    saturate_step: int = 10000


def anneal_lambda(step: int, schedule: AnnealSchedule) -> float:
    """Logistic KL weight, clamped to exactly 1 from saturate_step on."""
    if step < 0:
        raise ContractError("anneal_lambda: step must be >= 0")
    if step >= schedule.saturate_step:
        return 1.0
    return float(1.0 / (1.0 + np.exp(-schedule.steepness * (step - schedule.midpoint))))


@dataclass
class LossReport:
    kl_cs: float
    kl_lcp: float
    rec_cs: float
    rec_lcp: float
    lam: float  # the annealing weight ("lambda" in logs)
    total: float


def make_report(kl_cs, kl_lcp, rec_cs, rec_lcp, lam) -> LossReport:
    total = lam * (kl_cs + kl_lcp) + rec_cs + rec_lcp
    return LossReport(kl_cs=float(kl_cs), kl_lcp=float(kl_lcp), rec_cs=float(rec_cs),
                      rec_lcp=float(rec_lcp), lam=float(lam), total=float(total))


# --- tensor-level terms (used inside the training tape) -----------------------

def _sum_last_mean_rest(x: dm.Tensor) -> dm.Tensor:
    # sum within a sample, mean over any batch axis
    if x.values.ndim == 1:
        return dm.reduce_sum(x)
    return dm.reduce_mean(dm.reduce_sum(x, axis=x.values.ndim - 1))


def kl_standard_t(g) -> dm.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) as a taped scalar."""
    s2 = dm.square(g.sigma)
    per = dm.sub(dm.add(dm.square(g.mu), s2), dm.log(s2))
    per = dm.sub(per, dm.constant(np.asarray(1.0, dtype=per.values.dtype)))
    return dm.scale(_sum_last_mean_rest(per), 0.5)


def kl_lcp_t(g_data, g_cond) -> dm.Tensor:
    """Closed-form KL against the condition posterior; (mu_c, sigma_c) are
    detached so no gradient reaches the condition encoder through this term."""
    mu_c = dm.detach(g_cond.mu)
    sig_c = g_cond.sigma.values
    inv_var_c = dm.constant((1.0 / (sig_c * sig_c)).astype(sig_c.dtype))
    s2 = dm.square(g_data.sigma)
    spread = dm.sub(s2, dm.log(s2))
    spread = dm.sub(spread, dm.constant(np.asarray(1.0, dtype=s2.values.dtype)))
    one = dm.constant(np.asarray(1.0, dtype=s2.values.dtype))
    shift = dm.add(g_data.mu, dm.mul(dm.sub(g_data.sigma, one), mu_c))
    mean_term = dm.mul(dm.square(shift), inv_var_c)
    return dm.scale(_sum_last_mean_rest(dm.add(spread, mean_term)), 0.5)


def recon_sum_t(raw_steps: list, targets) -> dm.Tensor:
    """Sum of squared differences within each sample, mean over the batch.
    raw_steps holds per-frame (B, 4J) head outputs; targets is (B, T, 4J)."""
    targets = np.asarray(targets)
    if len(raw_steps) != targets.shape[1]:
        raise DimensionError(f"recon_sum_t: {len(raw_steps)} steps vs targets {targets.shape}")
    acc = None
    for t, y in enumerate(raw_steps):
        tgt = dm.constant(targets[:, t].astype(y.values.dtype))
        step = dm.reduce_sum(dm.square(dm.sub(y, tgt)), axis=1)
        acc = step if acc is None else dm.add(acc, step)
    return dm.reduce_mean(acc)


# --- report-level operations ---------------------------------------------------

def _gaussian_arrays(g):
    mu = g.mu.values if hasattr(g.mu, "values") else np.asarray(g.mu, dtype=np.float64)
    sigma = g.sigma.values if hasattr(g.sigma, "values") else np.asarray(g.sigma, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise NumericError("gaussian parameters contain non-finite values")
    return np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)


def kl_standard(g) -> float:
    mu, sigma = _gaussian_arrays(g)
    s2 = sigma * sigma
    per = mu * mu + s2 - 1.0 - np.log(s2)
    return float(0.5 * per.sum(axis=-1).mean())


def kl_lcp(g_data, g_cond) -> float:
    mu, sigma = _gaussian_arrays(g_data)
    mu_c, sig_c = _gaussian_arrays(g_cond)
    s2 = sigma * sigma
    shift = mu + (sigma - 1.0) * mu_c
    per = s2 - 1.0 - np.log(s2) + (shift * shift) / (sig_c * sig_c)
    return float(0.5 * per.sum(axis=-1).mean())


def recon_mse(pred: Motion, gt: Motion) -> float:
    """Sum over frames, joints, and quaternion components of squared error."""
    if pred.frames.shape != gt.frames.shape:
        raise DimensionError(f"recon_mse: {pred.frames.shape} vs {gt.frames.shape}")
    d = pred.frames - gt.frames
    return float(np.sum(d * d))


def total_loss(pred_obs: Motion, gt_obs: Motion, pred_fut: Motion, gt_fut: Motion,
               g_cond, g_data, lam: float) -> LossReport:
    """Assemble the four terms with weight lam on both KLs."""
    return make_report(kl_cs=kl_standard(g_cond),
                       kl_lcp=kl_lcp(g_data, g_cond),
                       rec_cs=recon_mse(pred_obs, gt_obs),
                       rec_lcp=recon_mse(pred_fut, gt_fut),
                       lam=lam)


# --- Monte-Carlo oracle ---------------------------------------------------------

def mc_kl_oracle(p, q, n: int, seed: int, chunk: int = 100_000):
    """Estimate KL(p || q) for diagonal Gaussians by sampling from p.

    Returns (estimate, standard_error); deterministic given seed. p and q
    may be GaussianParams or (mean, std) pairs."""
    if n < 10_000:
        raise ContractError("mc_kl_oracle: need n >= 10^4")
    mu_p, sig_p = [a.ravel() for a in _gaussian_arrays(_as_gaussian(p))]
    mu_q, sig_q = [a.ravel() for a in _gaussian_arrays(_as_gaussian(q))]
    if mu_p.shape != mu_q.shape:
        raise DimensionError("mc_kl_oracle: dimension mismatch between p and q")
    log_det = float(np.sum(np.log(sig_q)) - np.sum(np.log(sig_p)))
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    remaining = n
    while remaining > 0:
        m = min(chunk, remaining)
        eps = rng.standard_normal((m, mu_p.size))
        x = mu_p + sig_p * eps
        quad_p = np.sum(eps * eps, axis=1)
        zq = (x - mu_q) / sig_q
        quad_q = np.sum(zq * zq, axis=1)
        f = 0.5 * (quad_q - quad_p) + log_det
        total += float(f.sum())
        total_sq += float((f * f).sum())
        remaining -= m
    est = total / n
    var = max(0.0, (total_sq - n * est * est) / max(1, n - 1))
    return est, float(np.sqrt(var / n))


class _Pair:
    def __init__(self, mu, sigma):
        self.mu = mu
        self.sigma = sigma


def _as_gaussian(g):
    if hasattr(g, "mu") and hasattr(g, "sigma"):
        return g
    mean, std = g
    return _Pair(np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))
