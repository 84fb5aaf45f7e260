"""Evaluation: diversity, discriminator quality, action context, test ELBO
terms, and best-of-K Euler-angle error.

Quality convention: the score is the fraction of held-out generated motions
that a freshly trained real-vs-generated classifier labels real. 0.5 means
indistinguishable, 0 means trivially fake. This direction makes "higher is
better" up to 0.5, matching the inverse-accuracy reading of the source
metric.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from . import loss as losses
from . import model as mdl
from .data import MotionDataset, assign_mode, make_windows, mode_continuations, windows_to_arrays
from .errors import ContractError, DimensionError
from .pose import Motion, quat_to_euler_array
from .sample import PredictionSet, sample_futures
from .train import Adam, ModelCheckpoint


def thread_cap() -> int:
    raw = os.environ.get("LCPSEQ_THREADS", "").strip()
    if raw:
        return max(1, int(raw))
    return min(4, os.cpu_count() or 1)


def parallel_map(fn, items):
    """Ordered map over items with at most thread_cap() workers."""
    items = list(items)
    cap = thread_cap()
    if cap == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(fn, items))


# --- diversity ----------------------------------------------------------------

def diversity(samples: list) -> float:
    """Mean pairwise L2 distance between flattened quaternion sequences."""
    k = len(samples)
    if k < 2:
        raise ContractError("diversity needs at least two samples")
    flat = np.stack([m.flat().ravel() for m in samples])
    if any(m.frames.shape != samples[0].frames.shape for m in samples):
        raise DimensionError("diversity: samples disagree on shape")
    total = 0.0
    for i in range(k):
        diffs = flat[i + 1:] - flat[i]
        total += float(np.sum(np.sqrt(np.sum(diffs * diffs, axis=1))))
    return total / (k * (k - 1) / 2)


# --- sequence classifier --------------------------------------------------------

class SeqClassifier:
    """Single-layer GRU encoder with a dense softmax head."""

    def __init__(self, n_classes: int, joints: int, hidden: int = 128,
                 seed: int = 0, class_names: list | None = None):
        if n_classes < 2:
            raise ContractError("SeqClassifier needs >= 2 classes")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.joints = joints
        self.hidden = hidden
        self.enc = mdl._init_gru(rng, 4 * joints, hidden, np.float64)
        self.w = mdl._mat(rng, hidden, (hidden, n_classes), np.float64)
        self.b = mdl._zeros(n_classes, np.float64)
        self.class_names = class_names
        self.seed = seed

    def named_parameters(self):
        pairs = [(f"enc.{f}", getattr(self.enc, f))
                 for f in type(self.enc).__dataclass_fields__]
        return pairs + [("head.w", self.w), ("head.b", self.b)]

    def _logits(self, batch: np.ndarray) -> dm.Tensor:
        steps = [dm.constant(batch[:, t]) for t in range(batch.shape[1])]
        h = mdl._encode_steps(steps, self.enc)
        return dm.add(dm.matmul(h, self.w), self.b)

    def fit(self, motions: list, labels: list, epochs: int = 20,
            batch_size: int = 32, lr: float = 1e-2) -> None:
        x, y = self._to_arrays(motions, labels)
        n = x.shape[0]
        onehot = np.zeros((n, self.n_classes))
        onehot[np.arange(n), y] = 1.0
        rng = np.random.default_rng(self.seed + 1)
        opt = Adam(self.named_parameters(), lr)
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                with dm.Tape():
                    ce = self._cross_entropy(x[idx], onehot[idx])
                    grads = dm.backward(ce)
                named = {name: grads[p] for name, p in self.named_parameters()
                         if p in grads}
                opt.apply(named)

    def _cross_entropy(self, batch, onehot) -> dm.Tensor:
        logits = self._logits(batch)
        rowmax = np.repeat(logits.values.max(axis=1, keepdims=True),
                           self.n_classes, axis=1)
        shifted = dm.sub(logits, dm.constant(rowmax))
        log_z = dm.log(dm.reduce_sum(dm.exp(shifted), axis=1))
        true_logit = dm.reduce_sum(dm.mul(shifted, dm.constant(onehot)), axis=1)
        return dm.reduce_mean(dm.sub(log_z, true_logit))

    def predict_proba(self, motions: list) -> np.ndarray:
        x, _ = self._to_arrays(motions, None)
        logits = self._logits(x).values
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, motions: list) -> np.ndarray:
        return np.argmax(self.predict_proba(motions), axis=1)

    def _to_arrays(self, motions, labels):
        t0 = motions[0].t
        for m in motions:
            if m.j != self.joints:
                raise DimensionError(f"classifier expects {self.joints} joints, "
                                     f"got {m.j}")
            if m.t != t0:
                raise ContractError("classifier batch has mixed sequence lengths")
        x = np.stack([m.flat() for m in motions])
        if labels is None:
            return x, None
        y = np.asarray(labels, dtype=np.int64)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ContractError(f"label out of range for {self.n_classes} classes")
        return x, y


# --- quality -------------------------------------------------------------------

def quality_detail(gen: list, real_train: list, real_test: list, seed: int = 0,
                   epochs: int = 20, hidden: int = 128):
    """Returns (score, real_recall, classifier); quality() keeps the score."""
    if not gen or not real_train or not real_test:
        raise ContractError("quality: empty motion set")
    rng = np.random.default_rng(seed)
    gen = [gen[i] for i in rng.permutation(len(gen))]
    n_gen_train = len(gen) // 2
    n = min(n_gen_train, len(real_train))
    if n == 0 or len(gen) - n_gen_train == 0:
        raise ContractError("quality: classes are unbalanced after splitting")
    real_idx = rng.permutation(len(real_train))[:n]
    train_motions = [real_train[i] for i in real_idx] + gen[:n]
    train_labels = [1] * n + [0] * n  # 1 = real
    clf = SeqClassifier(2, gen[0].j, hidden=hidden, seed=seed)
    clf.fit(train_motions, train_labels, epochs=epochs)
    gen_eval = gen[n_gen_train:]
    score = float(np.mean(clf.predict(gen_eval) == 1))
    recall = float(np.mean(clf.predict(real_test) == 1))
    return score, recall, clf


def quality(gen: list, real_train: list, real_test: list, seed: int = 0,
            epochs: int = 20, hidden: int = 128) -> float:
    return quality_detail(gen, real_train, real_test, seed, epochs, hidden)[0]


# --- context -------------------------------------------------------------------

def train_context_classifier(futures: list, labels: list, class_names: list,
                             seed: int = 0, epochs: int = 20,
                             hidden: int = 128) -> SeqClassifier:
    clf = SeqClassifier(len(class_names), futures[0].j, hidden=hidden,
                        seed=seed, class_names=list(class_names))
    clf.fit(futures, labels, epochs=epochs)
    return clf


def context(gen: list, clf: SeqClassifier) -> float:
    """Mean per-class argmax accuracy of generated motions under clf."""
    if clf.class_names is None:
        raise ContractError("context: classifier has no class names")
    name_to_idx = {c: i for i, c in enumerate(clf.class_names)}
    y = []
    for m in gen:
        if m.label not in name_to_idx:
            raise ContractError(f"context: unknown label {m.label!r}")
        y.append(name_to_idx[m.label])
    y = np.asarray(y)
    pred = clf.predict(gen)
    accs = [float(np.mean(pred[y == c] == c)) for c in np.unique(y)]
    return float(np.mean(accs))


# --- best-of-K Euler MAE ---------------------------------------------------------

def _horizon_frames(horizons_ms, fps: int, t_fut: int) -> dict:
    out = {}
    for ms in horizons_ms:
        f = ms * fps / 1000.0
        fi = int(round(f))
        if abs(f - fi) > 1e-6 or fi < 1:
            raise ContractError(f"horizon {ms} ms is not a whole frame at {fps} fps")
        if fi > t_fut:
            raise ContractError(f"horizon {ms} ms needs frame {fi}, beyond "
                                f"t_fut={t_fut}")
        out[int(ms)] = fi
    return out


def _euler_flat(m: Motion) -> np.ndarray:
    # (T, 3J): per-joint intrinsic z-y-x angles
    return quat_to_euler_array(m.frames).reshape(m.t, 3 * m.j)


def mae_euler_best_of_k(pred_sets: list, gt: list, horizons_ms,
                        fps: int | None = None) -> dict:
    """Best-of-K mean angle error per horizon.

    Per observation, the sample minimizing cumulative per-frame error up to
    the horizon is selected; the map holds the mean over observations of the
    selected sample's error at the horizon frame. Per-frame error is the L2
    norm over Euler channels that vary in the ground truth (constant
    channels carry no signal and are masked out, following the common
    evaluation protocol for this metric).
    """
    if len(pred_sets) != len(gt):
        raise DimensionError("mae: pred_sets and gt lengths differ")
    if not pred_sets:
        raise ContractError("mae: no observations")
    fps = fps if fps is not None else gt[0].fps
    t_fut = gt[0].t
    frames_at = _horizon_frames(horizons_ms, fps, t_fut)

    gt_euler = np.stack([_euler_flat(m) for m in gt])  # (N, T, 3J)
    flat = gt_euler.reshape(-1, gt_euler.shape[-1])
    mask = flat.std(axis=0) > 1e-8
    if not mask.any():
        mask = np.ones(flat.shape[1], dtype=bool)

    out = {}
    per_frame = []  # per observation: (K, T) error curves
    for ps, g in zip(pred_sets, gt):
        ge = _euler_flat(g)[:, mask]
        errs = np.stack([
            np.sqrt(np.sum((_euler_flat(s)[:t_fut, mask] - ge) ** 2, axis=1))
            for s in ps.samples])
        per_frame.append(errs)
    for ms, fi in frames_at.items():
        vals = []
        for errs in per_frame:
            best = int(np.argmin(errs[:, :fi].sum(axis=1)))
            vals.append(errs[best, fi - 1])
        out[ms] = float(np.mean(vals))
    return out


def zero_velocity_prediction(obs: Motion, t_fut: int) -> Motion:
    """Repeat the last observed pose; the standard lower-bound baseline."""
    frames = np.repeat(obs.frames[-1:][np.newaxis].reshape(1, obs.j, 4),
                       t_fut, axis=0)
    return Motion(frames.copy(), fps=obs.fps, label=obs.label)


# --- test ELBO terms --------------------------------------------------------------

def test_elbo(pairs: list, ckpt: ModelCheckpoint, seed: int = 0):
    """(test_mse, test_kl) of the future branch, teacher-forced, averaged
    over the given windows. kl is the same closed form used in training."""
    if not pairs:
        raise ContractError("test_elbo: no windows")
    cfg = ckpt.config
    obs, fut = windows_to_arrays(pairs, cfg.dtype)
    rng = np.random.default_rng(seed)
    out = mdl.forward_pass(ckpt.params, cfg.model, obs, fut, rng, p_tf=1.0)
    pred = np.stack([r.values for r in out.raw_fut], axis=1)  # (B, T, 4J)
    mse = float(np.mean((pred - out.fut) ** 2))
    if out.standard_prior:
        kl = losses.kl_standard(out.g)
    else:
        kl = losses.kl_lcp(out.g, out.g_c)
    return mse, kl


# --- mode coverage (ablation) -------------------------------------------------------

def mode_coverage(ckpt: ModelCheckpoint, ds: MotionDataset, k: int = 20,
                  seed: int = 0, limit: int | None = None) -> float:
    """Fraction of observations whose K samples hit every ground-truth mode
    under nearest-trajectory assignment. Synthetic datasets only."""
    if ds.synth is None:
        raise ContractError("mode_coverage needs a synthetic dataset")
    boundary = ds.synth.boundary
    t_obs, t_fut = ckpt.config.t_obs, ckpt.config.t_fut
    if boundary < t_obs or ds.motions[0].t < boundary + t_fut:
        raise ContractError("mode_coverage: windows do not fit the boundary")
    indices = range(len(ds.motions) if limit is None else min(limit, len(ds.motions)))

    def covered(i: int) -> bool:
        m = ds.motions[i]
        obs = m.slice(boundary - t_obs, boundary)
        ps = sample_futures(obs, ckpt, k=k, t_fut=t_fut,
                            seed=int(np.random.default_rng((seed, i))
                                     .integers(2**63)))
        n_modes = mode_continuations(ds, i, t_fut).shape[0]
        hit = {assign_mode(ds, i, s.frames) for s in ps.samples}
        return len(hit) == n_modes

    flags = parallel_map(covered, indices)
    return float(np.mean(flags))


# --- assembled report ----------------------------------------------------------------

@dataclass
class EvalReport:
    test_mse: float
    test_kl: float
    diversity: float
    quality: float
    context: float
    mae_per_horizon: dict = field(default_factory=dict)

    def validate(self) -> None:
        vals = [self.test_mse, self.test_kl, self.diversity, self.quality,
                self.context, *self.mae_per_horizon.values()]
        if not all(np.isfinite(v) for v in vals):
            raise ContractError("EvalReport contains non-finite values")
        if self.diversity < 0 or not (0 <= self.quality <= 1) \
                or not (0 <= self.context <= 1):
            raise ContractError("EvalReport fields out of range")

    def to_json(self) -> str:
        doc = {"test_mse": self.test_mse, "test_kl": self.test_kl,
               "diversity": self.diversity, "quality": self.quality,
               "context": self.context,
               "mae_per_horizon": {str(k): v
                                   for k, v in sorted(self.mae_per_horizon.items())}}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    def to_csv(self) -> str:
        cols = ["test_mse", "test_kl", "diversity", "quality", "context"]
        vals = [getattr(self, c) for c in cols]
        for ms in sorted(self.mae_per_horizon):
            cols.append(f"mae_{ms}ms")
            vals.append(self.mae_per_horizon[ms])
        return ",".join(cols) + "\n" + ",".join(repr(float(v)) for v in vals) + "\n"


def default_horizons(t_fut: int, fps: int) -> tuple:
    standard = (80, 160, 320, 400)
    max_ms = t_fut * 1000.0 / fps
    return tuple(ms for ms in standard if ms <= max_ms + 1e-9)


def evaluate(ckpt: ModelCheckpoint, train_ds: MotionDataset,
             test_ds: MotionDataset, seed: int = 0, k: int = 50,
             horizons_ms=None, clf_epochs: int = 20, clf_hidden: int = 128,
             max_obs: int | None = None) -> EvalReport:
    """Full report over the test split; the train split feeds the metric
    classifiers only. Sampling per observation runs in parallel under the
    LCPSEQ_THREADS cap; all randomness derives from seed."""
    cfg = ckpt.config
    train_pairs = make_windows(train_ds, cfg.t_obs, cfg.t_fut, cfg.stride)
    test_pairs = make_windows(test_ds, cfg.t_obs, cfg.t_fut, cfg.stride)
    if not train_pairs or not test_pairs:
        raise ContractError("evaluate: a split yields no windows")
    if max_obs is not None:
        test_eval_pairs = test_pairs[:max_obs]
    else:
        test_eval_pairs = test_pairs

    mse, kl = test_elbo(test_pairs, ckpt, seed=seed)

    def draw(i: int) -> PredictionSet:
        pair = test_eval_pairs[i]
        return sample_futures(pair.observation, ckpt, k=k, t_fut=cfg.t_fut,
                              seed=int(np.random.default_rng((seed, i))
                                       .integers(2**63)))
    pred_sets = parallel_map(draw, range(len(test_eval_pairs)))

    div = float(np.mean([diversity(ps.samples) for ps in pred_sets]))

    gen = [s for ps in pred_sets for s in ps.samples]
    real_train = [p.future for p in train_pairs]
    real_test = [p.future for p in test_eval_pairs]
    q = quality(gen, real_train, real_test, seed=seed, epochs=clf_epochs,
                hidden=clf_hidden)

    class_names = train_ds.class_names
    if class_names and all(p.source_label in class_names for p in train_pairs):
        labels = [class_names.index(p.source_label) for p in train_pairs]
        clf = train_context_classifier(real_train, labels, class_names,
                                       seed=seed, epochs=clf_epochs,
                                       hidden=clf_hidden)
        ctx = context(gen, clf)
    else:
        ctx = float("nan")

    if horizons_ms is None:
        horizons_ms = default_horizons(cfg.t_fut, ckpt.fps)
    mae = mae_euler_best_of_k(pred_sets, real_test, horizons_ms, ckpt.fps) \
        if horizons_ms else {}

    report = EvalReport(test_mse=mse, test_kl=kl, diversity=div, quality=q,
                        context=ctx, mae_per_horizon=mae)
    if not np.isnan(ctx):
        report.validate()
    return report
