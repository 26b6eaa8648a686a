"""Command-line entry point: ``concat-lab <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .datagen import SyntheticDataset, generate_dataset, load_dataset, save_dataset
from .diffcore import load_checkpoint, ops, save_checkpoint
from .metrics import MetricsReport
from .models import Generator, SemanticProjector, decode_condition

log = logging.getLogger("concat_lab")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_FAILED = 0, 2, 3, 1

# named ablation switches -> dotted config overrides
SWITCHES = {
    "qc": ("losses.lambda_r", 0.0),
    "sup": ("losses.lambda_f", 0.0),
    "fcls": ("losses.lambda_seen", 0.0),
    "cia": ("losses.lambda_c", 0.0),
    "cga": ("losses.lambda_g", 0.0),
    "cg": ("losses.gamma", 0.0),
}
STAGE1_KEYS = ("losses.lambda_c", "losses.lambda_g", "losses.gamma", "losses.bank_size", "losses.tau",
               "training.stage1_epochs")


METRIC_KEYS = ("sPQ", "uPQ", "hPQ", "sIoU", "uIoU", "hIoU")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class MissingStage(CliError):
    def __init__(self, stage: int, path: Path):
        super().__init__(f"missing prerequisite: stage {stage} checkpoint not found at {path}", EXIT_PREREQ)


# ----------------------------------------------------------------------------
# run directory layout

class RunDir:
    def __init__(self, root: Path):
        self.root = Path(root)

    def checkpoint(self, stage: int) -> Path:
        return self.root / f"stage{stage}.json"

    def log(self, stage: int) -> Path:
        return self.root / "logs" / f"stage{stage}.jsonl"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.json"

    def metrics(self, mode: str) -> Path:
        return self.root / f"metrics_{mode}.json"

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def summary(self) -> Path:
        return self.root / "summary.csv"


def _write_config(run: RunDir, config: RunConfig) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(config.to_json())


def _write_log(path: Path, tlog: P.TrainLog) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in tlog.iterations:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _epoch_summary(tlog: P.TrainLog) -> list[dict]:
    rows = []
    for e in tlog.epochs:
        row = {"stage": tlog.stage, "epoch": e["epoch"], "loss": e["total"]}
        row.update({f"loss_{k}": v for k, v in e["components"].items()})
        if "category_mmd" in e:
            row["category_mmd"] = e["category_mmd"]
        for k in METRIC_KEYS:
            if "metrics" in e:
                row[k] = e["metrics"][k]
        rows.append(row)
    return rows


def _write_summary(run: RunDir, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with run.summary.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _dataset(run: RunDir, config: RunConfig) -> SyntheticDataset:
    if run.dataset.exists():
        ds = load_dataset(run.dataset)
        if ds.spec.to_dict() != config.dataset.to_dict():
            raise CliError(f"{run.dataset} was generated from a different dataset spec than the config", EXIT_CONFIG)
        return ds
    ds = generate_dataset(config.dataset)
    save_dataset(ds, run.dataset)
    return ds


def _save_projector(run: RunDir, stage: int, projector: SemanticProjector, config: RunConfig,
                    ds: SyntheticDataset) -> None:
    arrays = {f"projector.{k}": v for k, v in projector.state_dict().items()}
    save_checkpoint(run.checkpoint(stage), arrays,
                    {"kind": "projector", "stage": stage, "dataset_digest": ds.digest(),
                     "config": config.to_dict()})


def _save_generator(run: RunDir, generator: Generator, config: RunConfig, ds: SyntheticDataset) -> None:
    arrays = {f"cvae.{k}": v for k, v in generator.state_dict().items()}
    save_checkpoint(run.checkpoint(2), arrays,
                    {"kind": "generator", "stage": 2, "dataset_digest": ds.digest(),
                     "config": config.to_dict()})


def _load_stage(run: RunDir, stage: int, ds: SyntheticDataset) -> dict[str, np.ndarray]:
    path = run.checkpoint(stage)
    if not path.exists():
        raise MissingStage(stage, path)
    arrays, meta = load_checkpoint(path)
    if meta.get("dataset_digest") != ds.digest():
        raise CliError(f"{path} was trained on a different dataset", EXIT_PREREQ)
    return arrays


def _load_projector(run: RunDir, stage: int, config: RunConfig, ds: SyntheticDataset) -> SemanticProjector:
    arrays = _load_stage(run, stage, ds)
    proj = P.build_projector(config)
    proj.load_state_dict({k[len("projector."):]: v for k, v in arrays.items()})
    return proj.eval()


def _load_generator(run: RunDir, config: RunConfig, ds: SyntheticDataset) -> Generator:
    arrays = _load_stage(run, 2, ds)
    gen = P.build_generator(config)
    gen.load_state_dict({k[len("cvae."):]: v for k, v in arrays.items()})
    return gen.eval()


def _write_metrics(run: RunDir, mode: str, report: MetricsReport) -> Path:
    path = run.metrics(mode)
    path.write_text(report.to_json())
    MetricsReport.from_dict(json.loads(path.read_text()))  # validate what was written
    return path


# ----------------------------------------------------------------------------
# commands

def cmd_datagen(config: RunConfig, run: RunDir, args) -> None:
    ds = generate_dataset(config.dataset)
    save_dataset(ds, run.dataset)
    if load_dataset(run.dataset).digest() != ds.digest():
        raise CliError("dataset round trip failed", EXIT_FAILED)
    print(f"dataset {ds.digest()[:16]} -> {run.dataset}")


def cmd_stage1(config: RunConfig, run: RunDir, args) -> None:
    ds = _dataset(run, config)
    proj, tlog = P.train_stage1(ds, config)
    _save_projector(run, 1, proj, config, ds)
    _write_log(run.log(1), tlog)
    print(f"stage 1: final loss {tlog.epochs[-1]['total']:.4f} -> {run.checkpoint(1)}")


def cmd_stage2(config: RunConfig, run: RunDir, args) -> None:
    ds = _dataset(run, config)
    proj = _load_projector(run, 1, config, ds)
    gen, tlog = P.train_stage2(ds, proj, config)
    _save_generator(run, gen, config, ds)
    _write_log(run.log(2), tlog)
    print(f"stage 2: {tlog.skipped_batches} skipped batches -> {run.checkpoint(2)}")


def cmd_stage3(config: RunConfig, run: RunDir, args) -> None:
    ds = _dataset(run, config)
    proj = _load_projector(run, 1, config, ds)
    gen = _load_generator(run, config, ds)
    proj, tlog = P.union_finetune(ds, gen, proj, config)
    _save_projector(run, 3, proj, config, ds)
    _write_log(run.log(3), tlog)
    print(f"stage 3: final loss {tlog.epochs[-1]['total']:.4f} -> {run.checkpoint(3)}")


def cmd_eval(config: RunConfig, run: RunDir, args) -> None:
    ds = _dataset(run, config)
    stage = 1 if config.mode == "inductive" else 3
    proj = _load_projector(run, stage, config, ds)
    report = P.evaluate(ds, proj, config.mode)
    path = _write_metrics(run, config.mode, report)
    print(f"{config.mode}: sPQ {report.sPQ:.4f} uPQ {report.uPQ:.4f} hPQ {report.hPQ:.4f} -> {path}")


def _run_pipeline(config: RunConfig, run: RunDir, stage1=None) -> P.PipelineResult:
    _write_config(run, config)
    ds = _dataset(run, config)
    if stage1 is None:
        result = P.run_pipeline(ds, config)
    else:
        proj = P.build_projector(config)
        proj.load_state_dict(stage1[0])
        result = P.run_pipeline(ds, config, stage1=proj, stage1_log=stage1[1])
    proj1 = P.build_projector(config)
    proj1.load_state_dict(result.projector_stage1)
    _save_projector(run, 1, proj1, config, ds)
    rows = []
    if 1 in result.logs:
        _write_log(run.log(1), result.logs[1])
        rows += _epoch_summary(result.logs[1])
    _write_metrics(run, "inductive", result.inductive)
    if result.transductive is not None:
        _save_generator(run, result.generator, config, ds)
        _save_projector(run, 3, result.projector, config, ds)
        for stage in (2, 3):
            _write_log(run.log(stage), result.logs[stage])
            rows += _epoch_summary(result.logs[stage])
        _write_metrics(run, "transductive", result.transductive)
        fid = {"per_category": {str(k): v for k, v in result.fidelity.items()},
               "min": min(result.fidelity.values()), "mean": float(np.mean(list(result.fidelity.values())))}
        (run.root / "fidelity.json").write_text(json.dumps(fid, indent=2, sort_keys=True) + "\n")
    finals = [("final", "inductive", result.inductive), ("final", "transductive", result.transductive)]
    best = result.best_stage3()
    if best is not None:
        finals.append(("best", best[0], best[1]))
    for stage, epoch, rep in finals:
        if rep is not None:
            rows.append({"stage": stage, "epoch": epoch, **{k: getattr(rep, k) for k in METRIC_KEYS}})
    _write_summary(run, rows)
    return result


def cmd_pipeline(config: RunConfig, run: RunDir, args) -> None:
    result = _run_pipeline(config, run)
    rep = result.final
    print(f"{config.mode}: sPQ {rep.sPQ:.4f} uPQ {rep.uPQ:.4f} hPQ {rep.hPQ:.4f} "
          f"sIoU {rep.sIoU:.4f} uIoU {rep.uIoU:.4f} hIoU {rep.hIoU:.4f}")


def cmd_export_embeddings(config: RunConfig, run: RunDir, args) -> None:
    """CSV of projected real test queries and projected generated queries for every category."""
    ds = _dataset(run, config)
    stage = 3 if run.checkpoint(3).exists() else 1
    proj = _load_projector(run, stage, config, ds)
    gen = _load_generator(run, config, ds)
    rng = np.random.default_rng([config.seed, 55])
    table = ds.table
    rows = []
    for s in ds.test:
        S = ops.stop_gradient(proj(s.vision_queries)).data
        for q, o in enumerate(s.query_segment):
            if o >= 0:
                c = int(s.gt_categories[o])
                rows.append(("real", c, table.is_seen(c), S[q]))
    for c in range(table.n_categories):
        z = rng.standard_normal((args.per_category, gen.c_semantic))
        fake = decode_condition(gen, np.repeat(table.embeddings[c][None], args.per_category, axis=0), z)
        S = ops.stop_gradient(proj(fake)).data
        rows += [("generated", c, table.is_seen(c), s) for s in S]
    path = run.root / "embeddings.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "category", "seen"] + [f"s{i}" for i in range(gen.c_semantic)])
        for kind, c, seen, vec in rows:
            writer.writerow([kind, c, int(seen)] + [repr(float(x)) for x in vec])
    print(f"{len(rows)} rows (projector from stage {stage}) -> {path}")


def parse_switches(spec: str) -> list[str]:
    """``"qc=off,bank=16"`` -> dotted overrides."""
    out = []
    for item in spec.split(","):
        if "=" not in item:
            raise ConfigError(f"ablation switch {item!r} must look like name=off or bank=N")
        name, value = (x.strip() for x in item.split("=", 1))
        if name == "bank":
            try:
                out.append(f"losses.bank_size={int(value)}")
            except ValueError:
                raise ConfigError(f"bank switch needs an integer, got {value!r}") from None
        elif name in SWITCHES:
            if value not in ("off", "on"):
                raise ConfigError(f"switch {name} takes on/off, got {value!r}")
            if value == "off":
                key, v = SWITCHES[name]
                out.append(f"{key}={v}")
        else:
            raise ConfigError(f"unknown ablation switch {name!r} (known: {', '.join(sorted(SWITCHES))}, bank)")
    return out


def cmd_ablate(config: RunConfig, run: RunDir, args) -> None:
    variants = [("default", [])] + [(v, parse_switches(v)) for v in args.switches]
    configs = [(name, apply_overrides(config, ov), ov) for name, ov in variants]
    _write_config(run, config)
    shared = None
    table = []
    for name, cfg, ov in configs:
        touches_stage1 = any(o.split("=")[0] in STAGE1_KEYS for o in ov)
        sub = RunDir(run.root / "ablate" / name.replace("=", "-").replace(",", "_"))
        result = _run_pipeline(cfg, sub, stage1=None if touches_stage1 else shared)
        if not touches_stage1 and shared is None:
            shared = (result.projector_stage1, result.logs.get(1))
        rep = result.final
        table.append({"variant": name, "overrides": " ".join(ov), "mode": cfg.mode,
                      **{k: getattr(rep, k) for k in METRIC_KEYS}})
    path = run.root / "ablation.csv"
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    width = max(len(r["variant"]) for r in table)
    print(f"{'variant':<{width}}  " + "  ".join(f"{k:>6}" for k in METRIC_KEYS))
    for r in table:
        print(f"{r['variant']:<{width}}  " + "  ".join(f"{100 * r[k]:6.2f}" for k in METRIC_KEYS))
    print(f"-> {path}")


COMMANDS = {
    "datagen": cmd_datagen,
    "stage1": cmd_stage1,
    "stage2": cmd_stage2,
    "stage3": cmd_stage3,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "export-embeddings": cmd_export_embeddings,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. losses.lambda_r=0 (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (also reseeds the dataset)")
    common.add_argument("--mode", choices=("inductive", "transductive"))
    common.add_argument("--out", help="run directory (default: config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="concat-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "export-embeddings":
            p.add_argument("--per-category", type=int, default=50, help="generated samples per category")
        if name == "ablate":
            p.add_argument("switches", nargs="+",
                           help="variant switch sets such as qc=off or sup=off,qc=off or bank=16")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = list(args.overrides)
    if args.mode:
        overrides.append(f'mode="{args.mode}"')
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    config = apply_overrides(config, overrides)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        run = RunDir(Path(config.output_dir))
        if args.command not in ("pipeline", "ablate"):
            _write_config(run, config)
        COMMANDS[args.command](config, run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
