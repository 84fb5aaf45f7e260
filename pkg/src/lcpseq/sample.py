"""Inference: diverse futures from the condition's posterior, or its mode.

The future branch's latent is drawn as z_k = mu_c + sigma_c * eps_k, i.e.
from the learned conditional prior; no future frames are consumed. Decoding
is fully autoregressive (p_tf = 0). All K rollouts run as one batch, which
is the vectorized form of decoding them concurrently; outputs are ordered
by k by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .data import save_motion_file
from .errors import ConfigError, ContractError, SchemaError
from .pose import Motion
from .train import ModelCheckpoint


@dataclass
class PredictionSet:
    observation: Motion
    samples: list
    z_used: np.ndarray | None  # (K, d); None when restored from JSON
    seed: int


def sample_futures(obs: Motion, ckpt: ModelCheckpoint, k: int = 50,
                   t_fut: int = 60, seed: int = 0,
                   eps: np.ndarray | None = None) -> PredictionSet:
    """Draw K futures for one observation.

    (mu_c, sigma_c) are computed once; each sample uses one eps row. Passing
    eps explicitly replaces the seeded draw (the mode predictor passes
    zeros). The same latent law applies to every conditioning scheme: for
    concat decoders the condition-posterior draw fills the decoder's latent
    slot, alongside the scheme's conditioning features.
    """
    cfg = ckpt.config.model
    if obs.j != cfg.joints:
        raise ConfigError(f"observation has {obs.j} joints, checkpoint expects "
                          f"{cfg.joints}")
    if k < 1:
        raise ContractError("sample_futures: k must be >= 1")
    dtype = ckpt.params.obs_enc.w_z.values.dtype
    h_t, mu_c, sig_c = mdl.infer_condition(ckpt.params, cfg,
                                           obs.flat().astype(dtype))
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal((k, cfg.latent))
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (k, cfg.latent):
            raise ConfigError(f"eps must have shape {(k, cfg.latent)}, "
                              f"got {eps.shape}")
    z = mu_c[None, :] + sig_c[None, :] * eps
    frames = mdl.decode_futures_from_latents(ckpt.params, cfg, z, h_t, z,
                                             obs.flat()[-1], t_fut)
    samples = [Motion(frames[i], fps=ckpt.fps, label=obs.label)
               for i in range(k)]
    return PredictionSet(observation=obs, samples=samples, z_used=z, seed=seed)


def sample_mode(obs: Motion, ckpt: ModelCheckpoint, t_fut: int = 25) -> Motion:
    """Single deterministic future at z = mu_c (eps forced to zero)."""
    d = ckpt.config.model.latent
    ps = sample_futures(obs, ckpt, k=1, t_fut=t_fut, seed=0,
                        eps=np.zeros((1, d)))
    return ps.samples[0]


# --- export -----------------------------------------------------------------

def prediction_to_dict(ps: PredictionSet) -> dict:
    obs = ps.observation
    t_fut = ps.samples[0].t if ps.samples else 0
    return {
        "meta": {"seed": ps.seed, "K": len(ps.samples), "t_obs": obs.t,
                 "t_fut": t_fut, "fps": obs.fps, "J": obs.j},
        "observation": obs.flat().tolist(),
        "samples": [m.flat().tolist() for m in ps.samples],
    }


def write_prediction_json(ps: PredictionSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(prediction_to_dict(ps), fh, sort_keys=True,
                  separators=(",", ":"))
        fh.write("\n")


def load_prediction_json(path) -> PredictionSet:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("meta", "observation", "samples"):
        if key not in doc:
            raise SchemaError(f"{path}: missing {key!r}")
    meta = doc["meta"]
    for key in ("seed", "K", "t_obs", "t_fut", "fps", "J"):
        if key not in meta:
            raise SchemaError(f"{path}: meta missing {key!r}")
    j = int(meta["J"])

    def to_motion(rows, what):
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4 * j:
            raise SchemaError(f"{path}: {what} is not T x 4J for J={j}")
        return Motion(arr.reshape(arr.shape[0], j, 4), fps=int(meta["fps"]))

    samples = [to_motion(rows, f"samples[{i}]")
               for i, rows in enumerate(doc["samples"])]
    if len(samples) != int(meta["K"]):
        raise SchemaError(f"{path}: K={meta['K']} but {len(samples)} samples")
    return PredictionSet(observation=to_motion(doc["observation"], "observation"),
                         samples=samples, z_used=None, seed=int(meta["seed"]))


def write_prediction_csvs(ps: PredictionSet, out_dir) -> list:
    """One quaternion CSV per sample plus the observation; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, "observation.csv")]
    save_motion_file(ps.observation, paths[0])
    for i, m in enumerate(ps.samples):
        p = os.path.join(out_dir, f"sample_{i:03d}.csv")
        save_motion_file(m, p)
        paths.append(p)
    return paths
