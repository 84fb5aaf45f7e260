"""Command-line surface: synth, train, sample, evaluate, ablate, export.

Settings resolve in three layers: built-in defaults, then an optional
key=value config file, then flags. Every run's randomness hangs off one
--seed. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics as met
from . import model as mdl
from . import sample as smp
from . import train as trn
from .data import (MotionDataset, SynthSpec, load_dataset_dir, load_motion_file,
                   make_windows, save_dataset_dir, split_dataset, synth_generate)
from .errors import ConfigError, LcpseqError
from .loss import AnnealSchedule


class UsageError(LcpseqError):
    """Bad flags or config keys; maps to exit code 2."""


PROTOCOLS = {
    "stochastic_16_60": {"t_obs": 16, "t_fut": 60, "k": 50, "mode": False},
    "deterministic_50_25": {"t_obs": 50, "t_fut": 25, "k": 1, "mode": True},
}

# every key a config file may set, with its parser
_KEYS = {
    "seed": int, "epochs": int, "batch_size": int, "lr": float,
    "precision": int, "scheme": str, "protocol": str, "k": int,
    "t_obs": int, "t_fut": int, "stride": int, "p_tf_horizon": int,
    "hidden": int, "latent": int, "embed": int, "sigma_floor": float,
    "clip_norm": float, "beta1": float, "beta2": float, "adam_eps": float,
    "anneal_midpoint": float, "anneal_steepness": float, "anneal_saturate": int,
    "n_classes": int, "modes_per_condition": int, "joints": int, "frames": int,
    "n_motions": int, "noise_std": float, "amplitude": float, "fps": int,
    "test_frac": float, "clf_epochs": int, "clf_hidden": int, "max_obs": int,
}

_DEFAULTS = {
    "seed": 0, "epochs": 50, "batch_size": 64, "lr": 1e-3, "precision": 32,
    "scheme": "concat_h,reparam_z", "k": 50, "stride": 1, "p_tf_horizon": 10,
    "hidden": 1024, "latent": 128, "embed": 512, "sigma_floor": 1e-4,
    "clip_norm": 5.0, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
    "anneal_midpoint": 2500.0, "anneal_steepness": 1.0 / 250.0,
    "anneal_saturate": 10000,
    "n_classes": 2, "modes_per_condition": 2, "joints": 2, "frames": 32,
    "n_motions": 200, "noise_std": 0.0, "amplitude": 0.8, "fps": 25,
    "test_frac": 0.1, "clf_epochs": 20, "clf_hidden": 128,
}


def _read_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        if key not in _KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _KEYS[key](raw.strip())
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value for {key}") from None
    return out


def resolve_settings(args) -> dict:
    """defaults <- config file <- flags; explicit t_obs/t_fut beat protocol."""
    cfg = dict(_DEFAULTS)
    explicit = {}
    if getattr(args, "config", None):
        explicit.update(_read_config_file(args.config))
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("scheme", "scheme"),
                      ("protocol", "protocol"), ("k", "k"),
                      ("precision", "precision")):
        v = getattr(args, flag, None)
        if v is not None:
            explicit[key] = v
    proto = explicit.get("protocol")
    if proto is not None:
        if proto not in PROTOCOLS:
            raise UsageError(f"unknown protocol {proto!r}; choose from "
                             f"{sorted(PROTOCOLS)}")
        cfg["protocol"] = proto
        cfg["t_obs"] = PROTOCOLS[proto]["t_obs"]
        cfg["t_fut"] = PROTOCOLS[proto]["t_fut"]
        if "k" not in explicit:
            cfg["k"] = PROTOCOLS[proto]["k"]
    else:
        cfg["protocol"] = None
    for key, v in explicit.items():
        if key != "protocol":
            cfg[key] = v
    return cfg


def build_train_config(cfg: dict, joints: int) -> trn.TrainConfig:
    scheme = mdl.ConditioningScheme.parse(cfg["scheme"])
    model = mdl.ModelConfig(hidden=cfg["hidden"], latent=cfg["latent"],
                            joints=joints, embed=cfg["embed"],
                            sigma_floor=cfg["sigma_floor"], scheme=scheme)
    anneal = AnnealSchedule(midpoint=cfg["anneal_midpoint"],
                            steepness=cfg["anneal_steepness"],
                            saturate_step=cfg["anneal_saturate"])
    return trn.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"], clip_norm=cfg["clip_norm"],
        p_tf_horizon=cfg["p_tf_horizon"], anneal=anneal, seed=cfg["seed"],
        precision=cfg["precision"],
        t_obs=cfg.get("t_obs", 16), t_fut=cfg.get("t_fut", 60),
        stride=cfg["stride"], model=model)


def _emit(path) -> None:
    print(str(path))


def _load_motions(path) -> MotionDataset:
    p = Path(path)
    if p.is_dir():
        return load_dataset_dir(p)
    return load_motion_file(p)


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_settings(args)
    spec = SynthSpec(n_classes=cfg["n_classes"],
                     modes_per_condition=cfg["modes_per_condition"],
                     joints=cfg["joints"], frames=cfg["frames"],
                     n_motions=cfg["n_motions"], noise_std=cfg["noise_std"],
                     amplitude=cfg["amplitude"], fps=cfg["fps"])
    ds = synth_generate(spec, cfg["seed"])
    for p in save_dataset_dir(ds, args.out):
        _emit(p)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_settings(args)
    ds = load_dataset_dir(args.data)
    tc = build_train_config(cfg, ds.joints)
    ckpt, rows = trn.fit(ds, tc)
    trn.save_checkpoint(ckpt, args.out)
    _emit(args.out)
    log_path = f"{args.out}.log.csv"
    trn.write_metric_log(log_path, rows)
    _emit(log_path)
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_settings(args)
    ckpt = trn.load_checkpoint(args.ckpt)
    motion = _load_motions(args.data).motions[0]
    proto = cfg["protocol"]
    t_obs = cfg.get("t_obs", ckpt.config.t_obs)
    t_fut = cfg.get("t_fut", ckpt.config.t_fut)
    if motion.t < t_obs:
        raise ConfigError(f"{args.data}: motion has {motion.t} frames, "
                          f"observation needs {t_obs}")
    obs = motion.slice(0, t_obs)
    if proto and PROTOCOLS[proto]["mode"]:
        mode = smp.sample_mode(obs, ckpt, t_fut=t_fut)
        ps = smp.PredictionSet(observation=obs, samples=[mode],
                               z_used=None, seed=cfg["seed"])
    else:
        ps = smp.sample_futures(obs, ckpt, k=cfg["k"], t_fut=t_fut,
                                seed=cfg["seed"])
    smp.write_prediction_json(ps, args.out)
    _emit(args.out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_settings(args)
    ckpt = trn.load_checkpoint(args.ckpt)
    ds = load_dataset_dir(args.data)
    train_ds, test_ds = split_dataset(ds, seed=cfg["seed"],
                                      test_frac=cfg["test_frac"])
    report = met.evaluate(ckpt, train_ds, test_ds, seed=cfg["seed"],
                          k=cfg["k"], clf_epochs=cfg["clf_epochs"],
                          clf_hidden=cfg["clf_hidden"],
                          max_obs=cfg.get("max_obs"))
    out = Path(args.out)
    out.write_text(report.to_json(), encoding="utf-8")
    _emit(out)
    csv_path = out.with_suffix(".csv")
    if csv_path == out:
        csv_path = Path(str(out) + ".csv")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    _emit(csv_path)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_settings(args)
    ds = load_dataset_dir(args.data)
    train_ds, test_ds = split_dataset(ds, seed=cfg["seed"],
                                      test_frac=cfg["test_frac"])
    k = cfg["k"]
    rows = []
    context_clf = None
    test_pairs = None
    for scheme in mdl.ALL_SCHEMES:
        run_cfg = dict(cfg, scheme=scheme.tag)
        tc = build_train_config(run_cfg, ds.joints)
        ckpt, log = trn.fit(train_ds, tc)
        if test_pairs is None:
            test_pairs = make_windows(test_ds, tc.t_obs, tc.t_fut, tc.stride)
            if cfg.get("max_obs") is not None:
                test_pairs = test_pairs[:cfg["max_obs"]]
            train_pairs = make_windows(train_ds, tc.t_obs, tc.t_fut, tc.stride)
            names = train_ds.class_names
            if names and all(p.source_label in names for p in train_pairs):
                labels = [names.index(p.source_label) for p in train_pairs]
                context_clf = met.train_context_classifier(
                    [p.future for p in train_pairs], labels, names,
                    seed=cfg["seed"], epochs=cfg["clf_epochs"],
                    hidden=cfg["clf_hidden"])
        pred_sets = [
            smp.sample_futures(p.observation, ckpt, k=k, t_fut=tc.t_fut,
                               seed=int(np.random.default_rng((cfg["seed"], i))
                                        .integers(2**63)))
            for i, p in enumerate(test_pairs)]
        div = float(np.mean([met.diversity(ps.samples) for ps in pred_sets]))
        gen = [s for ps in pred_sets for s in ps.samples]
        ctx = met.context(gen, context_clf) if context_clf else float("nan")
        rows.append({"scheme": scheme.tag, "kl_lcp": log[-1]["kl_lcp"],
                     "diversity": div, "context": ctx})
    doc = {"seed": cfg["seed"], "epochs": cfg["epochs"], "k": k,
           "schemes": rows}
    out = Path(args.out)
    out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                   encoding="utf-8")
    _emit(out)
    return 0


def cmd_export(args) -> int:
    ps = smp.load_prediction_json(args.data)
    for p in smp.write_prediction_csvs(ps, args.out):
        _emit(p)
    return 0


# --- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--protocol", choices=sorted(PROTOCOLS),
                        help="observation/prediction window preset")
    common.add_argument("--scheme", help="conditioning scheme 'encoder,decoder'")
    common.add_argument("--k", type=int, help="samples per observation")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--precision", type=int, choices=(32, 64))

    p = argparse.ArgumentParser(prog="lcpseq",
                                description="Diverse sequence continuation "
                                            "with a learned conditional prior.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common],
                        help="write a synthetic bimodal dataset")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", parents=[common],
                        help="fit a model; writes checkpoint and metric log")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_train)

    smp_p = sub.add_parser("sample", parents=[common],
                           help="draw futures for one observation")
    smp_p.add_argument("--ckpt", required=True)
    smp_p.add_argument("--data", required=True,
                       help="motion file or dataset directory")
    smp_p.add_argument("--out", required=True)
    smp_p.set_defaults(func=cmd_sample)

    ep = sub.add_parser("evaluate", parents=[common],
                        help="write an evaluation report (JSON and CSV)")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", required=True)
    ep.set_defaults(func=cmd_evaluate)

    ap = sub.add_parser("ablate", parents=[common],
                        help="train all four conditioning schemes and compare")
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.set_defaults(func=cmd_ablate)

    xp = sub.add_parser("export", parents=[common],
                        help="convert a prediction JSON to per-sample CSVs")
    xp.add_argument("--data", required=True, help="prediction JSON path")
    xp.add_argument("--out", required=True, help="output directory")
    xp.set_defaults(func=cmd_export)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        missing = getattr(e, "filename", None) or e
        print(f"error: missing input file: {missing}", file=sys.stderr)
        return 1
    except LcpseqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
