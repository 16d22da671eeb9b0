"""Command-line entry point.

Configuration is layered: built-in defaults, then a ``--config`` key=value
file, then explicit flags. Every command writes ``config.toml`` (the merged
view) next to its outputs. Errors print one ``error: <kind>: <message>``
line on stderr; usage errors exit 2, validation and runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import HEADS, PROTO_MODES, ConfigError, ModelConfig, default_lr, preset, read_config_file, write_config_file
from .data import Dataset, DatasetError, SynthSpec, calibrate_deviation, hybrid_split, load_dataset, synth_dataset, synth_generate
from .harness import (
    SamplingError,
    TrainingError,
    ablation_run,
    episode_at,
    evaluate,
    export_embeddings,
    robustness_histogram,
    train,
    train_many,
    write_rows_csv,
    write_summary_csv,
)
from .graph import init_model
from .seeding import EVAL

COMMANDS = ("gen-data", "train", "eval", "ablate", "robustness", "export-embeddings", "gradcheck")

DEFAULTS: Dict[str, Any] = {
    "preset": "desk",
    "seed": 0,
    "n_way": 3,
    "k_shot": 5,
    "iterations": 3,
    "dense": True,
    "proto_mode": "nodes",
    "head": "feature",
    "lr": None,  # None: 0.001 for 3-way, 0.01 for 5-way
    "steps": 3000,
    "episodes": 300,
    "jobs": 1,
    "out": "out",
    "data": None,
    "checkpoint": None,
    "delta": 3.5,
    "samples_per_angle": 40,
    "n_classes": 10,
    "calibrate": False,
    "runs": 100,
    "run_episodes": 100,
    "stage": "final",
    "episode_index": 0,
    "max_coords": 4,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    a = common.add_argument
    a("--config", metavar="PATH", help="key = value file; flags override it")
    a("--seed", type=int, help="base seed for every random stream")
    a("--n-way", type=int)
    a("--k-shot", type=int)
    a("--iterations", type=int, help="graph iterations R (0..5)")
    a("--dense", type=parse_bool, metavar="BOOL")
    a("--proto-mode", choices=PROTO_MODES)
    a("--head", choices=HEADS)
    a("--lr", type=float)
    a("--steps", type=int)
    a("--episodes", type=int)
    a("--jobs", type=int)
    a("--out", metavar="DIR")
    a("--preset", choices=("desk", "paper"))
    a("--data", metavar="MANIFEST", help="manifest.csv; omitted = in-memory synthetic data")
    a("--delta", type=float, help="synthetic angle deviation")
    a("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dgpnet", description="Few-shot SAR target recognition with prototype graph networks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--samples-per-angle", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--calibrate", action="store_const", const=True, help="binary-search delta against the raw-pixel oracle")

    sub.add_parser("train", parents=[common], help="episodic training")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH", required=True)

    sub.add_parser("ablate", parents=[common], help="train and score the five ablation variants")

    p = sub.add_parser("robustness", parents=[common], help="accuracy spread with and without prototype nodes")
    p.add_argument("--runs", type=int)
    p.add_argument("--run-episodes", type=int)

    p = sub.add_parser("export-embeddings", parents=[common], help="dump node features of one episode")
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--stage", choices=("embedding", "final"))
    p.add_argument("--episode-index", type=int)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--max-coords", type=int)
    return parser


def merge_settings(args: argparse.Namespace) -> Dict[str, Any]:
    settings = dict(DEFAULTS)
    if args.config:
        try:
            from_file = read_config_file(args.config)
        except OSError as exc:
            raise CliError("io", f"cannot read config {args.config}: {exc.strerror}") from None
        # snapshots carry derived model.* keys; they are informational only
        from_file = {k: v for k, v in from_file.items() if not k.startswith("model.")}
        unknown = sorted(set(from_file) - set(DEFAULTS))
        if unknown:
            raise CliError("config", f"unknown keys in {args.config}: {', '.join(unknown)}")
        settings.update(from_file)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    settings["dense"] = parse_bool(settings["dense"])
    if settings["lr"] is None:
        settings["lr"] = default_lr(int(settings["n_way"]))
    return settings


def model_config(s: Dict[str, Any]) -> ModelConfig:
    cfg = preset(
        s["preset"], int(s["n_way"]), int(s["k_shot"]),
        iterations=int(s["iterations"]), dense=bool(s["dense"]), proto_mode=s["proto_mode"], head=s["head"],
    )
    cfg.lr = float(s["lr"])
    cfg.seed = int(s["seed"])
    return cfg.validate()


def synth_spec(s: Dict[str, Any], cfg: Optional[ModelConfig] = None) -> SynthSpec:
    side = cfg.embedding.input_size if cfg is not None else (100 if s["preset"] == "paper" else 32)
    split_way = 5 if int(s["n_way"]) >= 5 else 3
    return SynthSpec(
        n_classes=int(s["n_classes"]), samples_per_angle=int(s["samples_per_angle"]), side=side,
        deviation=float(s["delta"]), seed=int(s["seed"]), split_n_way=split_way,
    ).validate()


def load_splits(s: Dict[str, Any], cfg: ModelConfig):
    ds: Dataset = load_dataset(s["data"]) if s["data"] else synth_dataset(synth_spec(s, cfg))
    if ds.side != cfg.embedding.input_size:
        raise CliError("data", f"images are {ds.side}x{ds.side} but the {s['preset']} preset expects "
                               f"{cfg.embedding.input_size}x{cfg.embedding.input_size}")
    split_way = 5 if cfg.graph.n_way >= 5 else 3
    if s["data"] and set(ds.splits) >= {"train", "test"}:
        return ds.split("train"), ds.split("test")
    return hybrid_split(ds, split_way)


def load_store(s: Dict[str, Any], cfg: ModelConfig):
    store = init_model(cfg)
    try:
        store.load(s["checkpoint"])
    except OSError as exc:
        raise CliError("io", f"cannot read checkpoint {s['checkpoint']}: {exc.strerror}") from None
    return store


def snapshot(out: Path, s: Dict[str, Any], cfg: Optional[ModelConfig] = None):
    values = {k: v for k, v in s.items() if v is not None}
    if cfg is not None:
        values.update({f"model.{k}": v for k, v in cfg.to_flat().items()})
    write_config_file(out / "config.toml", values, header="merged configuration")


# ------------------------------------------------------------------ commands


def cmd_gen_data(s, out: Path):
    spec = synth_spec(s)
    if s["calibrate"]:
        delta, acc = calibrate_deviation(spec)
        spec = dataclasses.replace(spec, deviation=delta)
        s["delta"] = delta
        print(f"calibrated delta={delta:.4f} oracle_acc={acc:.4f}")
    manifest = synth_generate(spec, out)
    snapshot(out, s)
    print(manifest)


def cmd_train(s, out: Path):
    cfg = model_config(s)
    tr, _ = load_splits(s, cfg)
    store, rep = train(cfg, tr, int(s["steps"]), log_every=max(1, int(s["steps"]) // 20))
    store.save(out / "model.dgpn")
    rep.write_jsonl(out / "train.jsonl")
    snapshot(out, s, cfg)
    tail = rep.losses[-min(50, len(rep.losses)):].mean()
    print(f"trained {len(rep.records)} steps, final loss {tail:.4f}, checkpoint {out / 'model.dgpn'}")


def cmd_eval(s, out: Path):
    cfg = model_config(s)
    _, te = load_splits(s, cfg)
    store = load_store(s, cfg)
    rep = evaluate(store, cfg, te, int(s["episodes"]), jobs=int(s["jobs"]))
    rep.write_jsonl(out / "eval.jsonl")
    write_summary_csv(out / "summary.csv", [rep])
    snapshot(out, s, cfg)
    print(f"mean_acc={rep.mean_acc:.4f} std={rep.std:.4f} episodes={len(rep.records)}")


def cmd_ablate(s, out: Path):
    cfg = model_config(s)
    tr, te = load_splits(s, cfg)
    reports = ablation_run(cfg, tr, te, int(s["steps"]), int(s["episodes"]), jobs=int(s["jobs"]))
    for rep in reports:
        if rep.records:
            rep.write_jsonl(out / f"{slug(rep.variant)}.jsonl")
    write_summary_csv(out / "summary.csv", reports)
    snapshot(out, s, cfg)
    for rep in reports:
        print(f"{rep.variant}: {rep.summary_row()['mean_acc']}")


def cmd_robustness(s, out: Path):
    cfg = model_config(s)
    tr, te = load_splits(s, cfg)
    configs = [cfg.replace(proto_mode=mode) for mode in ("nodes", "none")]
    stores = train_many(configs, tr, int(s["steps"]), jobs=int(s["jobs"]))
    for st in stores:
        if isinstance(st, TrainingError):
            raise st
    arms = list(zip(stores, configs))
    res = robustness_histogram(arms[0][0], arms[0][1], arms[1][0], arms[1][1], te,
                               runs=int(s["runs"]), episodes=int(s["run_episodes"]), jobs=int(s["jobs"]))
    rows = [[i, f"{a:.6f}", f"{b:.6f}"] for i, (a, b) in enumerate(zip(res.with_proto, res.without_proto))]
    write_rows_csv(out / "robustness.csv", ["run", "acc_with_proto", "acc_without_proto"], rows)
    snapshot(out, s, cfg)
    print(f"std_with={res.std_with:.6f} std_without={res.std_without:.6f} "
          f"mean_with={res.with_proto.mean():.4f} mean_without={res.without_proto.mean():.4f}")


def cmd_export(s, out: Path):
    cfg = model_config(s)
    _, te = load_splits(s, cfg)
    store = load_store(s, cfg)
    ep = episode_at(te, cfg, cfg.seed, EVAL, int(s["episode_index"]))
    header, rows = export_embeddings(store, cfg, ep, s["stage"])
    path = out / f"embeddings_{s['stage']}.csv"
    write_rows_csv(path, header, rows)
    snapshot(out, s, cfg)
    print(path)


def cmd_gradcheck(s, out: Path):
    from .checks import run_gradient_suite

    errors = run_gradient_suite(s["preset"], int(s["seed"]), int(s["max_coords"]))
    worst = max(errors.values())
    with open(out / "gradcheck.csv", "w") as fh:
        fh.write("case,max_rel_error\n")
        fh.writelines(f"{k},{v:.3e}\n" for k, v in errors.items())
    snapshot(out, s)
    print(f"max relative error {worst:.3e}")
    if not worst < 1e-4:
        raise CliError("gradcheck", f"max relative error {worst:.3e} >= 1e-4")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "export-embeddings": cmd_export,
    "gradcheck": cmd_gradcheck,
}


def slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_").lower()


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        s = merge_settings(args)
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](s, out)
    except CliError as exc:
        return fail(exc.kind, str(exc))
    except (ConfigError, DatasetError, SamplingError) as exc:
        return fail("validation", str(exc))
    except TrainingError as exc:
        return fail("training", str(exc))
    except (ValueError, OSError) as exc:
        return fail("error", str(exc))
    return 0


def fail(kind: str, message: str) -> int:
    print(f"error: {kind}: {' '.join(message.split())}", file=sys.stderr)
    return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
