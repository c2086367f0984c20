"""Command-line entry points: gen-toy, train, eval, rollout.

Every command is deterministic given --seed. Exit codes: 0 success,
2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .auxobj import AuxParams
from .dynamics import GenerativeParams, ModelConfig, rollout
from .experiments import ToyConfig, evaluate_model, generate_toy, var_metrics
from .fileio import read_checkpoint, read_dataset, write_array, write_dataset
from .inference import ProposalParams
from .tensor import NonFiniteError
from .training import Adam, OptConfig, named_params, train

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


PRESETS = {
    "paper": {
        "toy": {},
        "model": dict(d_x=1, d_u=0, d_z=8, d_g=8, d_rnn=32, d_mlp=64, n_heads=4,
                      d_qk=16, d_msg=16, gnn_layers=1),
        "optimizer": dict(lr=1e-3, total_steps=20000, batch_size=16, k_particles=4),
        "splits": {"train": 10_000, "valid": 10_000, "test": 10_000},
    },
    "small": {
        "toy": dict(n_vertices=12, n_steps=40, n_train=1000, n_valid=200, n_test=200),
        "model": dict(d_x=1, d_u=0, d_z=4, d_g=4, d_rnn=16, d_mlp=32, n_heads=2,
                      d_qk=8, d_msg=8, gnn_layers=1),
        "optimizer": dict(lr=1e-3, total_steps=5000, batch_size=16, k_particles=4),
        "splits": {"train": 1000, "valid": 200, "test": 200},
    },
}

_TOP_KEYS = {
    "schema_version", "preset", "seed", "toy", "splits", "model", "optimizer",
    "k_particles", "mc_samples", "n_negatives", "beta1", "beta2",
}


def _check_keys(given: dict, allowed, where: str) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_run_config(path: str | None, preset: str | None = None) -> dict:
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if "schema_version" not in raw:
            raise ConfigError("config is missing the mandatory schema_version field")
        if raw["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {raw['schema_version']}")
        _check_keys(raw, _TOP_KEYS, "config")
    preset = preset or raw.get("preset", "paper")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid options: {', '.join(PRESETS)}")
    base = PRESETS[preset]
    cfg = {
        "preset": preset,
        "seed": raw.get("seed", 0),
        "toy": {**base["toy"], **raw.get("toy", {})},
        "model": {**base["model"], **raw.get("model", {})},
        "optimizer": {**base["optimizer"], **raw.get("optimizer", {})},
        "splits": {**base["splits"], **raw.get("splits", {})},
        "k_particles": raw.get("k_particles", base["optimizer"]["k_particles"]),
        "mc_samples": raw.get("mc_samples", 1000),
        "n_negatives": raw.get("n_negatives", 8),
        "beta1": raw.get("beta1", 1.0),
        "beta2": raw.get("beta2", 1.0),
    }
    _validate_sub(cfg["toy"], ToyConfig, "toy")
    _validate_sub(cfg["model"], ModelConfig, "model")
    _validate_sub(cfg["optimizer"], OptConfig, "optimizer")
    return cfg


def _validate_sub(given: dict, dc_type, where: str) -> None:
    names = {f.name for f in dataclasses.fields(dc_type)}
    _check_keys(given, names, where)


def _toy_config(cfg: dict) -> ToyConfig:
    d = cfg["toy"].copy()
    if "eta" in d:
        d["eta"] = tuple(d["eta"])
    try:
        return ToyConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad toy config: {exc}") from exc


def _build_models(cfg: dict, seed: int):
    try:
        mc = ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    gen = GenerativeParams(mc, rng)
    prop = ProposalParams(mc, rng)
    aux = AuxParams(mc, rng, n_negatives=cfg["n_negatives"])
    return mc, gen, prop, aux


def _load_models(ckpt_dir: str):
    params, step, rng_state, extra, manifest = read_checkpoint(Path(ckpt_dir))
    stored = manifest.get("config", {})
    if "model" not in stored:
        raise ConfigError("checkpoint manifest has no model config")
    mc = ModelConfig(**stored["model"])
    rng = np.random.default_rng(0)
    gen = GenerativeParams(mc, rng)
    prop = ProposalParams(mc, rng)
    aux = AuxParams(mc, rng, n_negatives=stored.get("n_negatives", 8))
    tensors = named_params(gen, prop, aux)
    missing = set(tensors) - set(params)
    surplus = set(params) - set(tensors)
    if missing or surplus:
        raise ConfigError(
            f"checkpoint does not match model (missing {sorted(missing)[:3]}, "
            f"surplus {sorted(surplus)[:3]})"
        )
    for name, tens in tensors.items():
        if tuple(tens.value.shape) != tuple(np.shape(params[name])):
            raise ConfigError(f"shape mismatch for {name}")
        tens.value = np.asarray(params[name], dtype=np.float64)
    return mc, gen, prop, aux, step, rng_state, extra, manifest


def cmd_gen_toy(args) -> int:
    cfg = load_run_config(args.config, args.preset)
    seed = args.seed if args.seed is not None else cfg["seed"]
    toy = _toy_config(cfg)
    sizes = cfg["splits"]
    dataset = generate_toy(toy, sizes, seed=seed)
    out = write_dataset(dataset, Path(args.out))
    print(f"dataset written to {out}")
    for name, split in dataset.splits.items():
        print(f"  {name}: {split.n_examples} examples")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.preset)
    seed = args.seed if args.seed is not None else cfg["seed"]
    dataset = read_dataset(Path(args.dataset))
    split = dataset.splits["train"]
    try:
        opt_cfg = OptConfig(**cfg["optimizer"], beta1_aux=cfg["beta1"], beta2_aux=cfg["beta2"])
    except TypeError as exc:
        raise ConfigError(f"bad optimizer config: {exc}") from exc
    if args.steps is not None:
        opt_cfg.total_steps = args.steps
    mc, gen, prop, aux = _build_models(cfg, seed)
    start_step = 0
    optimizer = None
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    if args.resume:
        mc, gen, prop, aux, start_step, rng_state, extra, manifest = _load_models(args.resume)
        rng.bit_generator.state = rng_state
        optimizer = Adam(named_params(gen, prop, aux))
        if extra:
            optimizer.load_state(extra, manifest["extra_meta"].get("adam_t", start_step))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_config = {"model": cfg["model"], "n_negatives": cfg["n_negatives"]}
    history = train(
        gen, prop, aux, split, opt_cfg, rng, out_dir=out_dir,
        start_step=start_step, optimizer=optimizer, ckpt_config=ckpt_config,
    )
    if history:
        print(f"trained {len(history)} steps; final bound {history[-1]['bound']:.4f}")
    return 0


def cmd_eval(args) -> int:
    dataset = read_dataset(Path(args.dataset))
    split = dataset.splits[args.split]
    if args.max_examples:
        split = dataclasses.replace(
            split, X=split.X[: args.max_examples],
            graphs=split.graphs[: args.max_examples],
            covariates=split.covariates[: args.max_examples],
        )
    if args.baseline == "var":
        report = var_metrics(split, dataset.config, workers=args.workers)
    elif args.baseline:
        raise ConfigError(f"unknown baseline {args.baseline!r}; valid options: var")
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --baseline is given")
        _, gen, prop, _, _, _, _, _ = _load_models(args.checkpoint)
        rng = np.random.default_rng(args.seed or 0)
        report = evaluate_model(
            gen, prop, split, dataset.config, args.k_particles, args.mc_samples, rng,
        )
        report.extra["k_particles"] = args.k_particles
    print(report.lines())
    if args.out:
        payload = {
            "ll": report.ll, "mse": report.mse, "cp": report.cp,
            "n_examples": report.n_examples, "mc_samples": report.mc_samples,
            **{k: v for k, v in report.extra.items()},
        }
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_rollout(args) -> int:
    dataset = read_dataset(Path(args.dataset))
    split = dataset.splits[args.split]
    _, gen, prop, _, _, _, _, _ = _load_models(args.checkpoint)
    rng = np.random.default_rng(args.seed or 0)
    g = split.graphs[args.example]
    X = split.X[args.example]
    n_steps = dataset.config.n_steps
    prefix = X[: args.burn_in] if args.burn_in > 0 else None
    traj = rollout(
        gen, g, None, n_steps, rng, prefix=prefix,
        proposal=prop if prefix is not None else None,
        k_particles=args.k_particles, n_rollouts=args.n_rollouts,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "rollouts.bin", traj)
    with open(out / "trajectories.tsv", "w") as fh:
        fh.write("rollout\tstep\tvertex\tdim\tvalue\n")
        for r in range(traj.shape[0]):
            for t in range(traj.shape[1]):
                for v in range(traj.shape[2]):
                    for d in range(traj.shape[3]):
                        fh.write(f"{r}\t{t}\t{v}\t{d}\t{traj[r, t, v, d]:.6f}\n")
    print(f"rollouts shape {traj.shape} written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relssm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    gt = sub.add_parser("gen-toy", help="sample the synthetic benchmark dataset")
    gt.add_argument("--config")
    gt.add_argument("--preset", choices=sorted(PRESETS))
    gt.add_argument("--seed", type=int)
    gt.add_argument("--out", required=True)
    gt.set_defaults(func=cmd_gen_toy)

    tr = sub.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--config")
    tr.add_argument("--preset", choices=sorted(PRESETS))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--steps", type=int, help="override total training steps")
    tr.add_argument("--resume", help="checkpoint directory to continue from")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint or a baseline")
    ev.add_argument("--checkpoint")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--baseline", default="")
    ev.add_argument("--k-particles", type=int, default=100)
    ev.add_argument("--mc-samples", type=int, default=1000)
    ev.add_argument("--max-examples", type=int)
    ev.add_argument("--workers", type=int, default=0)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    ro = sub.add_parser("rollout", help="sample trajectories from a checkpoint")
    ro.add_argument("--checkpoint", required=True)
    ro.add_argument("--dataset", required=True)
    ro.add_argument("--split", default="test")
    ro.add_argument("--example", type=int, default=0)
    ro.add_argument("--burn-in", type=int, default=0)
    ro.add_argument("--n-rollouts", type=int, default=1)
    ro.add_argument("--k-particles", type=int, default=32)
    ro.add_argument("--seed", type=int)
    ro.add_argument("--out", required=True)
    ro.set_defaults(func=cmd_rollout)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
