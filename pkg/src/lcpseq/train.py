"""Training loop: joint optimization of both autoencoders.

One optimizer step per batch; the KL weight anneals per step while teacher
forcing decays per epoch. Checkpoints serialize to a sectioned binary format
with a length + CRC-32 trailer so truncation and corruption are detectable.
"""

from __future__ import annotations

import zlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from . import loss as losses
from . import model as mdl
from .data import MotionDataset, make_windows, windows_to_arrays
from .errors import ConfigError, ContractError, FormatError, IntegrityError, NumericError
from .loss import AnnealSchedule, LossReport, anneal_lambda

MAGIC = b"LCPVAE1\x00"
_KIND_TEXT = 1
_KIND_TENSOR = 2

METRIC_HEADER = "epoch,lambda,p_tf,kl_cs,kl_lcp,rec_cs,rec_lcp,total"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    p_tf_horizon: int = 10
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    seed: int = 0
    precision: int = 32
    t_obs: int = 16
    t_fut: int = 60
    stride: int = 1
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.p_tf_horizon < 1:
            raise ConfigError("p_tf_horizon must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.t_obs < 1 or self.t_fut < 1:
            raise ConfigError("t_obs and t_fut must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


def p_tf_value(epoch: int, horizon: int) -> float:
    """Teacher-forcing probability for a given epoch: linear 1 -> 0, then 0."""
    return max(0.0, 1.0 - epoch / horizon)


@dataclass
class ScheduleState:
    epoch: int = 0
    step: int = 0      # optimizer steps taken; drives the anneal
    p_tf: float = 1.0
    lam: float = 0.0


@dataclass
class ModelCheckpoint:
    config: TrainConfig
    params: mdl.ModelParams
    schedule: ScheduleState
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    fps: int = 25


def init_checkpoint(cfg: TrainConfig, fps: int = 25) -> ModelCheckpoint:
    rng = np.random.default_rng(cfg.seed)
    params = mdl.init_params(cfg.model, rng, cfg.dtype)
    return ModelCheckpoint(config=cfg, params=params, schedule=ScheduleState(),
                           fps=fps)


class Adam:
    """Adaptive-moment descent over named tensors, updating values in place."""

    def __init__(self, named, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps
        self.t = 0
        self.named = list(named)
        self.m = {n: np.zeros_like(p.values) for n, p in self.named}
        self.v = {n: np.zeros_like(p.values) for n, p in self.named}

    def apply(self, grads: dict) -> None:
        # validate every gradient before touching any parameter
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.named:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> dict:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}


def _loss_tensors(out: mdl.ForwardOut, lam: float):
    kl_cs_t = losses.kl_standard_t(out.g_c)
    if out.standard_prior:
        kl_lcp_t = losses.kl_standard_t(out.g)
    else:
        kl_lcp_t = losses.kl_lcp_t(out.g, out.g_c)
    rec_cs_t = losses.recon_sum_t(out.raw_obs, out.obs)
    rec_lcp_t = losses.recon_sum_t(out.raw_fut, out.fut)
    total_t = dm.add(dm.add(dm.scale(dm.add(kl_cs_t, kl_lcp_t), lam), rec_cs_t),
                     rec_lcp_t)
    return kl_cs_t, kl_lcp_t, rec_cs_t, rec_lcp_t, total_t


def _report_from_tensors(parts, lam: float) -> LossReport:
    kl_cs_t, kl_lcp_t, rec_cs_t, rec_lcp_t, total_t = parts
    named = [("kl_cs", kl_cs_t), ("kl_lcp", kl_lcp_t),
             ("rec_cs", rec_cs_t), ("rec_lcp", rec_lcp_t), ("total", total_t)]
    for name, t in named:
        if not np.all(np.isfinite(t.values)):
            raise NumericError(f"non-finite loss term: {name}")
    return LossReport(kl_cs=float(kl_cs_t.values), kl_lcp=float(kl_lcp_t.values),
                      rec_cs=float(rec_cs_t.values), rec_lcp=float(rec_lcp_t.values),
                      lam=lam, total=float(total_t.values))


def train_step(batch, ckpt: ModelCheckpoint, cfg: TrainConfig, rng,
               opt: Adam | None = None):
    """One forward/backward/update on a batch (obs, fut) of flat pose arrays.

    Mutates ckpt parameters and schedule in place and returns (ckpt, report).
    A fresh optimizer is created when none is supplied, so standalone calls
    carry no moment state between steps.
    """
    obs, fut = batch
    if obs.shape[0] == 0:
        raise ContractError("train_step: empty batch")
    if opt is None:
        opt = Adam(mdl.named_parameters(ckpt.params), cfg.learning_rate,
                   cfg.beta1, cfg.beta2, cfg.adam_eps)
    lam = anneal_lambda(ckpt.schedule.step, cfg.anneal)
    with dm.Tape():
        out = mdl.forward_pass(ckpt.params, cfg.model, obs, fut, rng,
                               ckpt.schedule.p_tf)
        parts = _loss_tensors(out, lam)
        report = _report_from_tensors(parts, lam)
        grad_map = dm.backward(parts[-1])
    grads = {}
    for name, p in mdl.named_parameters(ckpt.params):
        g = grad_map.get(p)
        if g is not None:
            grads[name] = g
    grads = clip_global_norm(grads, cfg.clip_norm)
    opt.apply(grads)
    ckpt.schedule.step += 1
    ckpt.schedule.lam = lam
    return ckpt, report


def evaluate_batch(ckpt: ModelCheckpoint, batch, seed: int = 0,
                   p_tf: float = 1.0) -> LossReport:
    """Loss terms on a batch without updating anything. Teacher-forced by
    default so the result is deterministic given (checkpoint, batch, seed)."""
    obs, fut = batch
    rng = np.random.default_rng(seed)
    lam = anneal_lambda(ckpt.schedule.step, ckpt.config.anneal)
    out = mdl.forward_pass(ckpt.params, ckpt.config.model, obs, fut, rng, p_tf)
    return _report_from_tensors(_loss_tensors(out, lam), lam)


def fit(ds: MotionDataset, cfg: TrainConfig):
    """Train on all windows of ds; returns (checkpoint, per-epoch log rows).

    Each row is a dict matching METRIC_HEADER: loss terms are epoch means,
    lambda is its value after the epoch's last step.
    """
    if ds.joints != cfg.model.joints:
        raise ConfigError(f"dataset has {ds.joints} joints, model expects "
                          f"{cfg.model.joints}")
    pairs = make_windows(ds, cfg.t_obs, cfg.t_fut, cfg.stride)
    if not pairs:
        raise ContractError("fit: dataset yields no windows")
    obs_all, fut_all = windows_to_arrays(pairs, cfg.dtype)
    n = obs_all.shape[0]

    ckpt = init_checkpoint(cfg, fps=ds.fps)
    if ds.normalization is not None:
        ckpt.norm_mean, ckpt.norm_std = ds.normalization
    rng = np.random.default_rng(cfg.seed + 1)  # distinct stream from init
    opt = Adam(mdl.named_parameters(ckpt.params), cfg.learning_rate,
               cfg.beta1, cfg.beta2, cfg.adam_eps)

    rows = []
    for epoch in range(cfg.epochs):
        ckpt.schedule.epoch = epoch
        ckpt.schedule.p_tf = p_tf_value(epoch, cfg.p_tf_horizon)
        order = rng.permutation(n)
        sums = np.zeros(5)
        steps = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            _, rep = train_step((obs_all[idx], fut_all[idx]), ckpt, cfg, rng, opt)
            sums += (rep.kl_cs, rep.kl_lcp, rep.rec_cs, rep.rec_lcp, rep.total)
            steps += 1
        mean = sums / steps
        rows.append({"epoch": epoch,
                     "lambda": anneal_lambda(ckpt.schedule.step, cfg.anneal),
                     "p_tf": ckpt.schedule.p_tf,
                     "kl_cs": mean[0], "kl_lcp": mean[1],
                     "rec_cs": mean[2], "rec_lcp": mean[3], "total": mean[4]})
    ckpt.schedule.epoch = cfg.epochs
    ckpt.schedule.lam = anneal_lambda(ckpt.schedule.step, cfg.anneal)
    return ckpt, rows


def write_metric_log(path, rows) -> None:
    cols = METRIC_HEADER.split(",")
    lines = [METRIC_HEADER]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --- checkpoint serialization ---------------------------------------------
#
# Layout: MAGIC, u32 section count, then sections; each is
#   u8 kind | u32 name length | name | u64 payload length | payload.
# Text payloads are key-sorted "key=value" lines. Tensor payloads are
#   u8 itemsize (4|8) | u8 ndim | ndim x u64 dims | row-major little-endian.
# Trailer: u64 body length | u32 CRC-32 of the body (everything before it).

def _pack_section(kind: int, name: str, payload: bytes) -> bytes:
    nb = name.encode()
    return struct.pack("<BI", kind, len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def _pack_tensor(arr: np.ndarray) -> bytes:
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    head = struct.pack("<BB", arr.dtype.itemsize, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + dims + np.ascontiguousarray(le).tobytes()


def _unpack_tensor(buf: bytes, name: str) -> np.ndarray:
    if len(buf) < 2:
        raise FormatError(f"tensor section {name!r} too short")
    itemsize, ndim = struct.unpack_from("<BB", buf, 0)
    if itemsize not in (4, 8):
        raise FormatError(f"tensor section {name!r}: bad itemsize {itemsize}")
    off = 2
    if len(buf) < off + 8 * ndim:
        raise FormatError(f"tensor section {name!r}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off) if ndim else ()
    off += 8 * ndim
    dtype = np.dtype(f"<f{itemsize}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(buf) - off != count * itemsize:
        raise FormatError(f"tensor section {name!r}: payload size mismatch")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return arr.reshape(shape).astype(np.dtype(f"=f{itemsize}"))


_CONFIG_FIELDS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "beta1": float,
    "beta2": float, "adam_eps": float, "clip_norm": float, "p_tf_horizon": int,
    "seed": int, "precision": int, "t_obs": int, "t_fut": int, "stride": int,
    "anneal.midpoint": float, "anneal.steepness": float, "anneal.saturate_step": int,
    "model.hidden": int, "model.latent": int, "model.joints": int,
    "model.embed": int, "model.sigma_floor": float,
    "model.encoder_mode": str, "model.decoder_mode": str,
    "fps": int,
}

_SCHEDULE_FIELDS = {"epoch": int, "step": int, "p_tf": float, "lam": float}


def _config_text(cfg: TrainConfig, fps: int) -> str:
    vals = {
        "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate, "beta1": cfg.beta1,
        "beta2": cfg.beta2, "adam_eps": cfg.adam_eps, "clip_norm": cfg.clip_norm,
        "p_tf_horizon": cfg.p_tf_horizon, "seed": cfg.seed,
        "precision": cfg.precision, "t_obs": cfg.t_obs, "t_fut": cfg.t_fut,
        "stride": cfg.stride,
        "anneal.midpoint": cfg.anneal.midpoint,
        "anneal.steepness": cfg.anneal.steepness,
        "anneal.saturate_step": cfg.anneal.saturate_step,
        "model.hidden": cfg.model.hidden, "model.latent": cfg.model.latent,
        "model.joints": cfg.model.joints, "model.embed": cfg.model.embed,
        "model.sigma_floor": cfg.model.sigma_floor,
        "model.encoder_mode": cfg.model.scheme.encoder_mode,
        "model.decoder_mode": cfg.model.scheme.decoder_mode,
        "fps": fps,
    }
    return _kv_text(vals)


def _kv_text(vals: dict) -> str:
    lines = []
    for key in sorted(vals):
        v = vals[key]
        lines.append(f"{key}={_fmt(v) if not isinstance(v, str) else v}")
    return "\n".join(lines) + "\n"


def _parse_kv(text: str, known: dict, what: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise FormatError(f"{what}: malformed line {line!r}")
        if key not in known:
            raise FormatError(f"{what}: unrecognized key {key!r}")
        out[key] = known[key](raw)
    missing = set(known) - set(out)
    if missing:
        raise FormatError(f"{what}: missing keys {sorted(missing)}")
    return out


def _config_from_kv(kv: dict) -> tuple[TrainConfig, int]:
    scheme = mdl.ConditioningScheme(encoder_mode=kv["model.encoder_mode"],
                                    decoder_mode=kv["model.decoder_mode"])
    model_cfg = mdl.ModelConfig(hidden=kv["model.hidden"], latent=kv["model.latent"],
                                joints=kv["model.joints"], embed=kv["model.embed"],
                                sigma_floor=kv["model.sigma_floor"], scheme=scheme)
    anneal = AnnealSchedule(midpoint=kv["anneal.midpoint"],
                            steepness=kv["anneal.steepness"],
                            saturate_step=kv["anneal.saturate_step"])
    cfg = TrainConfig(epochs=kv["epochs"], batch_size=kv["batch_size"],
                      learning_rate=kv["learning_rate"], beta1=kv["beta1"],
                      beta2=kv["beta2"], adam_eps=kv["adam_eps"],
                      clip_norm=kv["clip_norm"], p_tf_horizon=kv["p_tf_horizon"],
                      anneal=anneal, seed=kv["seed"], precision=kv["precision"],
                      t_obs=kv["t_obs"], t_fut=kv["t_fut"], stride=kv["stride"],
                      model=model_cfg)
    return cfg, kv["fps"]


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    sections = [
        _pack_section(_KIND_TEXT, "config",
                      _config_text(ckpt.config, ckpt.fps).encode()),
        _pack_section(_KIND_TEXT, "schedule", _kv_text({
            "epoch": ckpt.schedule.epoch, "step": ckpt.schedule.step,
            "p_tf": ckpt.schedule.p_tf, "lam": ckpt.schedule.lam}).encode()),
    ]
    for name, p in mdl.named_parameters(ckpt.params):
        sections.append(_pack_section(_KIND_TENSOR, name, _pack_tensor(p.values)))
    if ckpt.norm_mean is not None:
        sections.append(_pack_section(_KIND_TENSOR, "norm.mean",
                                      _pack_tensor(np.asarray(ckpt.norm_mean))))
        sections.append(_pack_section(_KIND_TENSOR, "norm.std",
                                      _pack_tensor(np.asarray(ckpt.norm_std))))
    body = MAGIC + struct.pack("<I", len(sections)) + b"".join(sections)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<QI", len(body), zlib.crc32(body)))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    if len(data) < len(MAGIC) + 4 + 12:
        raise IntegrityError(f"{path}: file too short")
    body, trailer = data[:-12], data[-12:]
    stored_len, stored_crc = struct.unpack("<QI", trailer)
    if stored_len != len(body):
        raise IntegrityError(f"{path}: length mismatch "
                             f"(trailer says {stored_len}, body is {len(body)})")
    if zlib.crc32(body) != stored_crc:
        raise IntegrityError(f"{path}: checksum mismatch")

    (n_sections,) = struct.unpack_from("<I", body, len(MAGIC))
    off = len(MAGIC) + 4
    text = {}
    tensors = {}
    for _ in range(n_sections):
        if off + 5 > len(body):
            raise IntegrityError(f"{path}: section table overruns body")
        kind, name_len = struct.unpack_from("<BI", body, off)
        off += 5
        name = body[off:off + name_len].decode()
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", body, off)
        off += 8
        payload = body[off:off + payload_len]
        if len(payload) != payload_len:
            raise IntegrityError(f"{path}: section {name!r} overruns body")
        off += payload_len
        if kind == _KIND_TEXT:
            text[name] = payload.decode()
        elif kind == _KIND_TENSOR:
            tensors[name] = _unpack_tensor(payload, name)
        else:
            raise FormatError(f"{path}: unknown section kind {kind}")
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} trailing bytes after sections")
    if "config" not in text or "schedule" not in text:
        raise FormatError(f"{path}: missing config or schedule section")

    cfg, fps = _config_from_kv(_parse_kv(text["config"], _CONFIG_FIELDS, "config"))
    sched_kv = _parse_kv(text["schedule"], _SCHEDULE_FIELDS, "schedule")
    schedule = ScheduleState(**sched_kv)

    params = mdl.init_params(cfg.model, np.random.default_rng(0), cfg.dtype)
    for name, p in mdl.named_parameters(params):
        if name not in tensors:
            raise FormatError(f"{path}: missing parameter section {name!r}")
        arr = tensors.pop(name)
        if arr.shape != p.values.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                              f"expected {p.values.shape}")
        p.values = arr.astype(cfg.dtype, copy=False)
    norm_mean = tensors.pop("norm.mean", None)
    norm_std = tensors.pop("norm.std", None)
    if tensors:
        raise FormatError(f"{path}: unexpected sections {sorted(tensors)}")
    return ModelCheckpoint(config=cfg, params=params, schedule=schedule,
                           norm_mean=norm_mean, norm_std=norm_std, fps=fps)
