"""Coupled recurrent autoencoders over observed and future motion.

The condition autoencoder (cs_*) compresses the observed window into a
diagonal Gaussian posterior (mu_c, sigma_c). The future autoencoder (lcp_*)
encodes the future window conditioned on the observation and, in the default
scheme, draws its latent through the extended reparameterization
z = mu + sigma * z_c, tying the future latent to the condition posterior
(the learned conditional prior). Concatenation variants of the encoder and
decoder conditioning exist for ablation.

All math runs through diffmath primitives on (batch, features) tensors;
sequences are folded step by step. Decoder outputs feed back through
quaternion canonicalization as plain values, so gradients follow the hidden
state chain, not the pose feedback loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import diffmath as dm
from .errors import ContractError, DimensionError
from .pose import Motion, canonicalize_frames, rest_pose

ENCODER_MODES = ("concat_h", "concat_z")
DECODER_MODES = ("concat_h", "concat_z", "reparam_z")


@dataclass(frozen=True)
class ConditioningScheme:
    encoder_mode: str = "concat_h"
    decoder_mode: str = "reparam_z"

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ContractError(f"ConditioningScheme: bad encoder_mode {self.encoder_mode!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ContractError(f"ConditioningScheme: bad decoder_mode {self.decoder_mode!r}")

    @classmethod
    def parse(cls, text: str) -> "ConditioningScheme":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ContractError(f"ConditioningScheme: expected 'enc,dec', got {text!r}")
        return cls(encoder_mode=parts[0], decoder_mode=parts[1])

    @property
    def tag(self) -> str:
        return f"{self.encoder_mode},{self.decoder_mode}"


# the four ablation variants; the last is the default model
ALL_SCHEMES = (
    ConditioningScheme("concat_h", "concat_h"),
    ConditioningScheme("concat_z", "concat_z"),
    ConditioningScheme("concat_z", "reparam_z"),
    ConditioningScheme("concat_h", "reparam_z"),
)


@dataclass
class ModelConfig:
    hidden: int = 1024
    latent: int = 128
    joints: int = 32
    embed: int = 512
    sigma_floor: float = 1e-4
    scheme: ConditioningScheme = ConditioningScheme()

    @property
    def pose_dim(self) -> int:
        return 4 * self.joints

    @property
    def encoder_cond_width(self) -> int:
        return self.hidden if self.scheme.encoder_mode == "concat_h" else self.latent

    @property
    def bridge_in_width(self) -> int:
        if self.scheme.decoder_mode == "reparam_z":
            return self.latent
        if self.scheme.decoder_mode == "concat_h":
            return self.latent + self.hidden
        return 2 * self.latent


@dataclass
class GruParams:
    w_z: dm.Tensor
    u_z: dm.Tensor
    b_z: dm.Tensor
    w_r: dm.Tensor
    u_r: dm.Tensor
    b_r: dm.Tensor
    w_h: dm.Tensor
    u_h: dm.Tensor
    b_h: dm.Tensor


@dataclass
class LatentHead:
    """Dense stack in -> embed -> (mu, sigma), ReLU hidden, floored sigma."""

    w1: dm.Tensor
    b1: dm.Tensor
    w_mu: dm.Tensor
    b_mu: dm.Tensor
    w_sig: dm.Tensor
    b_sig: dm.Tensor


@dataclass
class Bridge:
    """Dense stack latent -> embed -> hidden with tanh output, the generated
    initial state of a decoder GRU."""

    w1: dm.Tensor
    b1: dm.Tensor
    w2: dm.Tensor
    b2: dm.Tensor


@dataclass
class PoseHead:
    w: dm.Tensor
    b: dm.Tensor


@dataclass
class GaussianParams:
    mu: dm.Tensor
    sigma: dm.Tensor


@dataclass
class ModelParams:
    obs_enc: GruParams
    fut_enc: GruParams
    cs_head: LatentHead
    lcp_head: LatentHead
    cs_bridge: Bridge
    lcp_bridge: Bridge
    obs_dec: GruParams
    fut_dec: GruParams
    obs_head: PoseHead
    fut_head: PoseHead


def named_parameters(params: ModelParams) -> list:
    """Deterministic (name, Tensor) list in declaration order."""
    out = []
    for f in fields(params):
        group = getattr(params, f.name)
        for g in fields(group):
            out.append((f"{f.name}.{g.name}", getattr(group, g.name)))
    return out


def _mat(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return dm.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return dm.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _init_gru(rng, d_in, h, dtype):
    return GruParams(
        w_z=_mat(rng, d_in, (d_in, h), dtype), u_z=_mat(rng, h, (h, h), dtype), b_z=_zeros(h, dtype),
        w_r=_mat(rng, d_in, (d_in, h), dtype), u_r=_mat(rng, h, (h, h), dtype), b_r=_zeros(h, dtype),
        w_h=_mat(rng, d_in, (d_in, h), dtype), u_h=_mat(rng, h, (h, h), dtype), b_h=_zeros(h, dtype),
    )


def _init_latent_head(rng, d_in, embed, latent, dtype):
    return LatentHead(
        w1=_mat(rng, d_in, (d_in, embed), dtype), b1=_zeros(embed, dtype),
        w_mu=_mat(rng, embed, (embed, latent), dtype), b_mu=_zeros(latent, dtype),
        w_sig=_mat(rng, embed, (embed, latent), dtype), b_sig=_zeros(latent, dtype),
    )


def _init_bridge(rng, d_in, embed, hidden, dtype):
    return Bridge(
        w1=_mat(rng, d_in, (d_in, embed), dtype), b1=_zeros(embed, dtype),
        w2=_mat(rng, embed, (embed, hidden), dtype), b2=_zeros(hidden, dtype),
    )


def init_params(cfg: ModelConfig, rng, dtype=np.float32) -> ModelParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases; draw order is fixed."""
    p = cfg.pose_dim
    return ModelParams(
        obs_enc=_init_gru(rng, p, cfg.hidden, dtype),
        fut_enc=_init_gru(rng, p, cfg.hidden, dtype),
        cs_head=_init_latent_head(rng, cfg.hidden, cfg.embed, cfg.latent, dtype),
        lcp_head=_init_latent_head(rng, cfg.hidden + cfg.encoder_cond_width,
                                   cfg.embed, cfg.latent, dtype),
        cs_bridge=_init_bridge(rng, cfg.latent, cfg.embed, cfg.hidden, dtype),
        lcp_bridge=_init_bridge(rng, cfg.bridge_in_width, cfg.embed, cfg.hidden, dtype),
        obs_dec=_init_gru(rng, p, cfg.hidden, dtype),
        fut_dec=_init_gru(rng, p, cfg.hidden, dtype),
        obs_head=PoseHead(w=_mat(rng, cfg.hidden, (cfg.hidden, p), dtype), b=_zeros(p, dtype)),
        fut_head=PoseHead(w=_mat(rng, cfg.hidden, (cfg.hidden, p), dtype), b=_zeros(p, dtype)),
    )


# --- building blocks ---------------------------------------------------------

def gru_step(x: dm.Tensor, h: dm.Tensor, p: GruParams) -> dm.Tensor:
    """One gated recurrent unit step: h' = (1-u)*h + u*c."""
    u = dm.sigmoid(dm.add(dm.add(dm.matmul(x, p.w_z), dm.matmul(h, p.u_z)), p.b_z))
    r = dm.sigmoid(dm.add(dm.add(dm.matmul(x, p.w_r), dm.matmul(h, p.u_r)), p.b_r))
    c = dm.tanh(dm.add(dm.add(dm.matmul(x, p.w_h), dm.matmul(dm.mul(r, h), p.u_h)), p.b_h))
    return dm.add(h, dm.mul(u, dm.sub(c, h)))  # algebraically (1-u)*h + u*c


def _encode_steps(steps: list, enc: GruParams) -> dm.Tensor:
    if not steps:
        raise ContractError("encode_sequence: empty input")
    b = steps[0].values.shape[0]
    hdim = enc.u_z.values.shape[0]
    h = dm.constant(np.zeros((b, hdim), dtype=enc.u_z.values.dtype))
    for x in steps:
        h = gru_step(x, h, enc)
    return h


def encode_sequence(m: Motion, enc: GruParams) -> dm.Tensor:
    """Fold a motion's frames from a zero state; returns the last hidden
    state with batch dimension 1."""
    dtype = enc.w_z.values.dtype
    steps = [dm.constant(m.flat()[t][None].astype(dtype)) for t in range(m.t)]
    return _encode_steps(steps, enc)


def _latent_head_apply(x: dm.Tensor, head: LatentHead, sigma_floor: float) -> GaussianParams:
    e = dm.relu(dm.add(dm.matmul(x, head.w1), head.b1))
    mu = dm.add(dm.matmul(e, head.w_mu), head.b_mu)
    raw = dm.add(dm.matmul(e, head.w_sig), head.b_sig)
    sigma = dm.add(dm.relu(raw), dm.constant(np.asarray(sigma_floor, dtype=x.values.dtype)))
    return GaussianParams(mu=mu, sigma=sigma)


def cs_encode(h_t: dm.Tensor, head: LatentHead, sigma_floor: float = 1e-4) -> GaussianParams:
    """Condition posterior (mu_c, sigma_c) from the observation encoding."""
    return _latent_head_apply(h_t, head, sigma_floor)


def lcp_encode(h_T: dm.Tensor, cond: dm.Tensor, head: LatentHead,
               sigma_floor: float = 1e-4) -> GaussianParams:
    """Future posterior (mu, sigma) from the future encoding concatenated
    with the conditioning signal (h_t or z_c depending on scheme)."""
    return _latent_head_apply(dm.concat([h_T, cond], axis=1), head, sigma_floor)


def reparam_standard(g: GaussianParams, eps: dm.Tensor) -> dm.Tensor:
    """z_c = mu + sigma * eps with caller-supplied noise."""
    return dm.add(g.mu, dm.mul(g.sigma, eps))


def reparam_extended(g: GaussianParams, z_c: dm.Tensor) -> dm.Tensor:
    """z = mu + sigma * z_c, the condition-tied latent draw."""
    return dm.add(g.mu, dm.mul(g.sigma, z_c))


def latent_to_hidden(z: dm.Tensor, bridge: Bridge) -> dm.Tensor:
    """Dense stack with tanh output so the result ranges like a GRU state."""
    e = dm.relu(dm.add(dm.matmul(z, bridge.w1), bridge.b1))
    return dm.tanh(dm.add(dm.matmul(e, bridge.w2), bridge.b2))


# --- decoding ----------------------------------------------------------------

def _decode_steps(dec: GruParams, head: PoseHead, h0: dm.Tensor, seed_flat,
                  steps: int, p_tf: float, targets, rng):
    """Autoregressive rollout. targets is (B, steps, 4J) or None; one teacher
    coin per time step, shared across the batch. Returns (raw outputs per
    step, input trace)."""
    if p_tf > 0 and targets is None:
        raise ContractError("decode: teacher forcing requires a target")
    dtype = h0.values.dtype
    b, p = np.asarray(seed_flat).shape
    joints = p // 4
    x = dm.constant(np.asarray(seed_flat, dtype=dtype))
    h = h0
    raw, trace = [], []
    for t in range(steps):
        trace.append(x.values.copy())
        h = gru_step(x, h, dec)
        y = dm.add(dm.matmul(h, head.w), head.b)
        raw.append(y)
        if t + 1 < steps:
            use_target = targets is not None and rng.random() < p_tf
            if use_target:
                nxt = targets[:, t]
            else:
                # feed back the canonicalized pose as a plain value; the
                # gradient path through time is the hidden state only
                nxt = canonicalize_frames(y.values.reshape(b, joints, 4)).reshape(b, p)
            x = dm.constant(np.asarray(nxt, dtype=dtype))
    return raw, trace


def raw_to_frames(raw: list, joints: int) -> np.ndarray:
    """(B, T, J, 4) canonical frames from per-step raw head outputs."""
    stacked = np.stack([y.values for y in raw], axis=1)
    b, t = stacked.shape[0], stacked.shape[1]
    return canonicalize_frames(stacked.reshape(b, t, joints, 4))


def decode_motion(h0: dm.Tensor, seed_pose, steps: int, p_tf: float,
                  target: Motion | None, rng, dec: GruParams, head: PoseHead,
                  fps: int = 25) -> Motion:
    """Single-sequence decoding wrapper; returns a canonical Motion."""
    joints = np.asarray(seed_pose).shape[0]
    seed_flat = np.asarray(seed_pose).reshape(1, joints * 4)
    targets = target.flat()[None] if target is not None else None
    raw, _ = _decode_steps(dec, head, h0, seed_flat, steps, p_tf, targets, rng)
    return Motion(raw_to_frames(raw, joints)[0], fps=fps)


# --- full training-time pass --------------------------------------------------

@dataclass
class FrozenCond:
    """Condition-branch values captured at a base point.

    The future encoder consumes the condition through a stop-gradient, so the
    branch behaves as a constant. Supplying a capture here pins those
    constants for finite-difference probing; training leaves it None and the
    stop-gradient re-reads the live values each pass."""
    h_t: np.ndarray
    mu_c: np.ndarray
    sigma_c: np.ndarray
    z_c: np.ndarray


@dataclass
class ForwardOut:
    h_t: dm.Tensor
    h_T: dm.Tensor
    g_c: GaussianParams
    g: GaussianParams
    z_c: dm.Tensor
    z: dm.Tensor
    raw_obs: list
    raw_fut: list
    obs: np.ndarray
    fut: np.ndarray
    standard_prior: bool  # future latent drew from N(0, I), not the condition


def forward_pass(params: ModelParams, cfg: ModelConfig, obs, fut, rng,
                 p_tf: float, frozen_cond: FrozenCond | None = None) -> ForwardOut:
    """Both autoencoders on one batch. obs is (B, t_obs, 4J), fut is
    (B, t_fut, 4J). Noise draw order is fixed for reproducibility:
    condition eps, condition decoder coins, future eps (concat schemes
    only), future decoder coins.

    The condition features handed to the future encoder pass through a
    stop-gradient: the condition posterior is never pulled around by the
    future branch's KL. Gradient still reaches the condition encoder through
    its own KL, its own reconstruction, and z_c's role in the future decoder."""
    dtype = params.obs_enc.w_z.values.dtype
    obs = np.asarray(obs, dtype=dtype)
    fut = np.asarray(fut, dtype=dtype)
    if obs.shape[2] != cfg.pose_dim or fut.shape[2] != cfg.pose_dim:
        raise DimensionError(f"forward_pass: pose width {obs.shape[2]} does not match "
                             f"model joints {cfg.joints}")
    b, t_obs = obs.shape[0], obs.shape[1]
    t_fut = fut.shape[1]
    scheme = cfg.scheme

    obs_steps = [dm.constant(obs[:, t]) for t in range(t_obs)]
    h_t = _encode_steps(obs_steps, params.obs_enc)
    g_c = cs_encode(h_t, params.cs_head, cfg.sigma_floor)
    eps_c = dm.constant(rng.standard_normal((b, cfg.latent)).astype(dtype))
    z_c = reparam_standard(g_c, eps_c)

    h0_c = latent_to_hidden(z_c, params.cs_bridge)
    seed_c = np.tile(rest_pose(cfg.joints).reshape(1, cfg.pose_dim), (b, 1))
    raw_obs, _ = _decode_steps(params.obs_dec, params.obs_head, h0_c, seed_c,
                               t_obs, p_tf, obs, rng)

    fut_steps = [dm.constant(fut[:, t]) for t in range(t_fut)]
    h_T = _encode_steps(fut_steps, params.fut_enc)
    if scheme.encoder_mode == "concat_h":
        cond_vals = frozen_cond.h_t if frozen_cond else h_t.values
    else:
        cond_vals = frozen_cond.z_c if frozen_cond else z_c.values
    cond_e = dm.constant(np.array(cond_vals, dtype=dtype))  # stop-gradient
    g = lcp_encode(h_T, cond_e, params.lcp_head, cfg.sigma_floor)

    if scheme.decoder_mode == "reparam_z":
        z = reparam_extended(g, z_c)
        bridge_in = z
        standard = False
    else:
        eps = dm.constant(rng.standard_normal((b, cfg.latent)).astype(dtype))
        z = reparam_standard(g, eps)
        cond_d = h_t if scheme.decoder_mode == "concat_h" else z_c
        bridge_in = dm.concat([z, cond_d], axis=1)
        standard = True
    h0_f = latent_to_hidden(bridge_in, params.lcp_bridge)
    raw_fut, _ = _decode_steps(params.fut_dec, params.fut_head, h0_f, obs[:, -1],
                               t_fut, p_tf, fut, rng)
    return ForwardOut(h_t=h_t, h_T=h_T, g_c=g_c, g=g, z_c=z_c, z=z,
                      raw_obs=raw_obs, raw_fut=raw_fut, obs=obs, fut=fut,
                      standard_prior=standard)


# --- inference helpers --------------------------------------------------------

def infer_condition(params: ModelParams, cfg: ModelConfig, obs_flat):
    """Condition posterior for one observation; returns (h_t, mu_c, sigma_c)
    as plain arrays. obs_flat is (t_obs, 4J)."""
    dtype = params.obs_enc.w_z.values.dtype
    steps = [dm.constant(obs_flat[t][None].astype(dtype)) for t in range(obs_flat.shape[0])]
    h_t = _encode_steps(steps, params.obs_enc)
    g_c = cs_encode(h_t, params.cs_head, cfg.sigma_floor)
    return h_t.values[0], g_c.mu.values[0], g_c.sigma.values[0]


def decode_futures_from_latents(params: ModelParams, cfg: ModelConfig, z,
                                h_t, z_c, seed_flat, steps: int) -> np.ndarray:
    """Roll out K futures for latents z (K, d); fully autoregressive.

    h_t / z_c supply the decoder-side conditioning for the concat schemes
    and are ignored by the reparam scheme. Returns (K, steps, J, 4)."""
    dtype = params.obs_enc.w_z.values.dtype
    k = z.shape[0]
    zt = dm.constant(np.asarray(z, dtype=dtype))
    if cfg.scheme.decoder_mode == "reparam_z":
        bridge_in = zt
    elif cfg.scheme.decoder_mode == "concat_h":
        cond = np.tile(np.asarray(h_t, dtype=dtype)[None], (k, 1))
        bridge_in = dm.concat([zt, dm.constant(cond)], axis=1)
    else:
        bridge_in = dm.concat([zt, dm.constant(np.asarray(z_c, dtype=dtype))], axis=1)
    h0 = latent_to_hidden(bridge_in, params.lcp_bridge)
    seed = np.tile(np.asarray(seed_flat, dtype=dtype)[None], (k, 1))
    raw, _ = _decode_steps(params.fut_dec, params.fut_head, h0, seed,
                           steps, 0.0, None, None)
    return raw_to_frames(raw, cfg.joints)
