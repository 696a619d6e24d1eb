"""Command-line entry point: generate, train, eval, export, inspect-case."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datagen, evalkit
from .caseio import bundled_case, parse_case, read_text
from .errors import GridShieldError
from .grid import normalized_adjacency, weighted_adjacency
from .models import MODEL_KINDS, AceotConfig, build_model, default_config, node_probabilities
from .trainer import TrainConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ORACLE = "oracle"

DEFAULT_RUN = {
    "system": "ieee14",
    "case_path": None,
    "profile_path": None,
    "dataset_dir": "dataset",
    "checkpoint_dir": "checkpoints",
    "report_dir": "reports",
    "scale": datagen.DESK_SCALE,
    "seed": None,
    "gen": {},
    "model": {},
    "train": {},
}


class UsageError(Exception):
    """Bad flags, config or paths; reported with exit status 2."""


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """``key=value`` or ``section.key=value``; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    target = cfg
    for p in parts[:-1]:
        if not isinstance(target.get(p), dict):
            raise UsageError(f"unknown config section {p!r}")
        target = target[p]
    if len(parts) == 1 and parts[0] not in DEFAULT_RUN:
        raise UsageError(f"unknown config key {parts[0]!r}")
    target[parts[-1]] = _parse_value(raw)


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_RUN))
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        for k, v in loaded.items():
            if k not in DEFAULT_RUN:
                raise UsageError(f"unknown config key {k!r}")
            if isinstance(DEFAULT_RUN[k], dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    for flag in ("system", "case_path", "profile_path", "dataset_dir", "checkpoint_dir", "report_dir", "scale", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[flag] = v
    if cfg["seed"] is None:
        env = os.environ.get("GRIDSHIELD_SEED")
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise UsageError(f"GRIDSHIELD_SEED must be an integer, got {env!r}") from exc
    if not 0 < float(cfg["scale"]) <= 1:
        raise UsageError("scale must lie in (0, 1]")
    return cfg


def _echo(cfg: dict, command: str) -> None:
    print(f"# {command} config: " + json.dumps(cfg, sort_keys=True), flush=True)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _gen_config(cfg: dict) -> datagen.GenConfig:
    if cfg["case_path"] is not None:
        _require(cfg["case_path"], "case")
    if cfg["profile_path"] is not None:
        _require(cfg["profile_path"], "profile")
    try:
        return datagen.GenConfig(
            system=cfg["system"],
            scale=float(cfg["scale"]),
            seed=int(cfg["seed"]),
            case_path=cfg["case_path"],
            profile_path=cfg["profile_path"],
            **cfg["gen"],
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------- commands


def cmd_generate(cfg: dict, args) -> int:
    gcfg = _gen_config(cfg)
    ds = datagen.generate(gcfg)
    out = Path(cfg["dataset_dir"])
    manifest = datagen.write_dataset(ds, out)
    if args.csv:
        datagen.export_csv(ds, out / "test.csv", "test")
    print(manifest.to_json(), end="")
    return EXIT_OK


def _load_dataset(cfg: dict) -> datagen.Dataset:
    d = _require(cfg["dataset_dir"], "dataset")
    _require(d / "manifest.json", "dataset manifest")
    return datagen.read_dataset(d)


def _adjacency(ds: datagen.Dataset) -> np.ndarray:
    return normalized_adjacency(weighted_adjacency(ds.case))


def _model_config(cfg: dict, kind: str, ds: datagen.Dataset) -> AceotConfig:
    system = ds.manifest.system
    try:
        return default_config(system if system in ("ieee14", "ieee300") else "ieee14", kind, ds.manifest.n_buses, **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from exc


def cmd_train(cfg: dict, args) -> int:
    kind = args.model
    if kind not in MODEL_KINDS:
        raise UsageError(f"unknown model {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    ds = _load_dataset(cfg)
    mcfg = _model_config(cfg, kind, ds)
    try:
        tcfg = TrainConfig.from_dict({"seed": int(cfg["seed"]), **cfg["train"]})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from exc
    model, report = fit(kind, ds.splits, tcfg, mcfg, _adjacency(ds), log=lambda s: print(s, flush=True))

    out = Path(cfg["checkpoint_dir"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "model": kind,
        "system": ds.manifest.system,
        "seed": tcfg.seed,
        "model_config": mcfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "config_hash": ad.config_hash({"model": mcfg.to_dict(), "train": tcfg.to_dict()}),
        "best_epoch": report.best_epoch,
    }
    ckpt = out / f"{kind}.ckpt"
    ad.save_checkpoint(ckpt, model.parameters(), meta)
    (out / f"{kind}_train.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"best epoch {report.best_epoch}  val loss {report.best_val_loss:.5f}  stopped early {report.stopped_early}")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def write_oracle_checkpoint(path) -> None:
    """A parameter-free checkpoint whose predictions are the true labels (harness self-test)."""
    ad.save_checkpoint(path, [], {"model": ORACLE, "seed": 0, "config_hash": ad.config_hash({"model": ORACLE})})


def load_model(path):
    header, arrays = ad.load_checkpoint(path)
    kind = header.get("model")
    if kind == ORACLE:
        return ORACLE, header
    if kind not in MODEL_KINDS:
        raise UsageError(f"checkpoint {path} holds unknown model {kind!r}")
    mcfg = AceotConfig.from_dict(header["model_config"])
    model = build_model(kind, mcfg, seed=int(header.get("seed", 0)))
    model.load_state_dict(arrays)
    return model, header


def cmd_eval(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    model, header = load_model(_require(args.checkpoint, "checkpoint"))
    test = ds.splits[args.split]
    if model == ORACLE:
        probs = test.labels.astype(float)
    else:
        probs = node_probabilities(model, test.features, _adjacency(ds))
    report = evalkit.evaluate(probs, test.labels, test.kinds, header["model"], ds.manifest.system)
    if args.timing and model != ORACLE:
        report.inference_ms = evalkit.time_inference(model, test.features, _adjacency(ds), repeats=args.repeats)
    out = Path(cfg["report_dir"])
    evalkit.write_report(report, out)
    if report.inference_ms is not None:
        (out / "timing.json").write_text(json.dumps({"inference_ms": report.inference_ms}) + "\n")
    print(evalkit.format_table(report), end="")
    return EXIT_OK


def cmd_export(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "features":
        datagen.export_csv(ds, out, args.split)
        print(f"{len(ds.splits[args.split])} rows written to {out}")
        return EXIT_OK
    if args.checkpoint is None:
        raise UsageError("embedding export needs --checkpoint")
    model, _ = load_model(_require(args.checkpoint, "checkpoint"))
    if model == ORACLE:
        raise UsageError("the oracle checkpoint has no embeddings")
    sp = ds.splits[args.split]
    A = _adjacency(ds)
    with ad.no_grad():
        emb = np.concatenate(
            [model.encode(sp.features[i : i + 256], A, training=False).data for i in range(0, len(sp), 256)]
        )
    n, dim = emb.shape[1], emb.shape[2]
    ts = sp.timesteps if sp.timesteps is not None else np.full(len(sp), -1)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep", "kind", "bus", "label"] + [f"e_{j + 1}" for j in range(dim)])
        for i in range(len(sp)):
            for b in range(n):
                w.writerow(
                    [int(ts[i]), int(sp.kinds[i]), b + 1, int(sp.labels[i, b])] + [repr(float(v)) for v in emb[i, b]]
                )
    print(f"{len(sp) * n} node embeddings of size {dim} written to {out}")
    return EXIT_OK


def cmd_inspect(cfg: dict, args) -> int:
    from .acpf import newton_raphson

    target = args.case
    if Path(target).exists():
        case = parse_case(read_text(target))
    else:
        try:
            case = bundled_case(target)
        except (FileNotFoundError, KeyError, ValueError) as exc:
            raise UsageError(f"case not found: {target}") from exc
    g = weighted_adjacency(case)
    _, iters = newton_raphson(case)
    info = {
        "buses": case.n_bus,
        "branches": case.n_branch,
        "generators": len(case.gens),
        "base_mva": case.base_mva,
        "slack_bus": case.buses[case.slack].id,
        "pv_buses": len(case.pv),
        "pq_buses": len(case.pq),
        "zero_injection_buses": [case.buses[i].id for i in np.flatnonzero(g.is_zero_injection)],
        "off_nominal_taps": sum(1 for b in case.branches if b.tap != 1.0),
        "power_flow_iterations": iters,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--system", choices=sorted(datagen.SYSTEM_CASES))
    common.add_argument("--data", dest="dataset_dir", help="dataset directory")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gridshield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a labeled dataset")
    g.add_argument("--case", dest="case_path")
    g.add_argument("--profile", dest="profile_path")
    g.add_argument("--scale", type=float)
    g.add_argument("--csv", action="store_true", help="also export the test split as CSV")

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--model", required=True)
    t.add_argument("--out", dest="checkpoint_dir")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", dest="report_dir")
    e.add_argument("--split", default="test", choices=datagen.SPLITS)
    e.add_argument("--timing", action="store_true", help="also time single-sample inference")
    e.add_argument("--repeats", type=int, default=1000)

    x = sub.add_parser("export", parents=[common], help="CSV of features or node embeddings")
    x.add_argument("--what", choices=("features", "embeddings"), default="features")
    x.add_argument("--checkpoint")
    x.add_argument("--split", default="test", choices=datagen.SPLITS)
    x.add_argument("--out", required=True)

    i = sub.add_parser("inspect-case", parents=[common], help="summarize a MATPOWER case")
    i.add_argument("case", help="path to a .m file or a bundled case name (case5, case14, case300)")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "inspect-case": cmd_inspect,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve_config(args)
        _echo(cfg, args.command)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GridShieldError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
