"""Command line front end: ``cpgan gen-data | train | eval | flow-gt | plot``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Results are printed as tab-separated ``key<TAB>value`` lines (or a header
plus rows for tables) so they can be piped into other tools.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ContractError, NonFiniteLossError, ParseError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("cpgan")

DATA_ROOT_ENV = "CPGAN_DATA_ROOT"


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


# -- experiment files -------------------------------------------------------------

@dataclass
class ExperimentSpec:
    train: "TrainConfig"
    data: "DatasetConfig"
    output_dir: Path
    runs: int = 1
    dataset_name: str = "squares"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def load_experiment(path: str | Path | None, overrides: list[str] | None = None,
                    runs: int | None = None, output_dir: str | None = None) -> ExperimentSpec:
    """Read a TOML experiment file with ``[train]``, ``[data]`` and ``[run]`` tables.

    ``[data]`` takes ``dataset`` (a preset name) plus any DatasetConfig
    field; ``[run]`` takes ``runs`` and ``output_dir``. ``overrides`` are
    ``section.key=value`` strings applied on top of the file.
    """
    from .synthdata import preset
    from .trainer import TrainConfig

    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    unknown = set(doc) - {"train", "data", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    sections = {k: dict(doc.get(k, {})) for k in ("train", "data", "run")}
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in sections:
            raise ConfigError(f"override {item!r} must look like train.key=value, data.key=value or run.key=value")
        sections[section][name] = _coerce(value)

    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    bad = set(sections["train"]) - train_fields
    if bad:
        raise ConfigError(f"unknown [train] keys {sorted(bad)}")
    try:
        train = TrainConfig(**sections["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    data_opts = sections["data"]
    name = data_opts.pop("dataset", "squares")
    if "count_range" in data_opts:
        data_opts["count_range"] = tuple(data_opts["count_range"])
    if "cifar_path" not in data_opts and (data_root() / "cifar-10-batches-bin").exists():
        data_opts["cifar_path"] = str(data_root() / "cifar-10-batches-bin")
    try:
        data = preset(name, **data_opts)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    run_opts = sections["run"]
    bad = set(run_opts) - {"runs", "output_dir"}
    if bad:
        raise ConfigError(f"unknown [run] keys {sorted(bad)}")
    out = output_dir or run_opts.get("output_dir") or str(data_root() / "runs" / name)
    return ExperimentSpec(train=train, data=data, output_dir=Path(out),
                          runs=int(runs if runs is not None else run_opts.get("runs", 1)), dataset_name=name)


# -- output helpers -------------------------------------------------------------------

def _emit(pairs: dict) -> None:
    for k, v in pairs.items():
        if isinstance(v, float):
            v = f"{v:.4f}"
        print(f"{k}\t{v}")


def _table(header: list[str], rows: list[list]) -> None:
    print("\t".join(header))
    for row in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthdata import preset, write_dataset

    overrides = {}
    if args.cifar:
        overrides["cifar_path"] = args.cifar
    elif (data_root() / "cifar-10-batches-bin").exists():
        overrides["cifar_path"] = str(data_root() / "cifar-10-batches-bin")
    if args.image_size:
        overrides["image_size"] = args.image_size
    cfg = preset(args.dataset, **overrides)
    out = Path(args.out) if args.out else data_root() / args.dataset
    write_dataset(out, cfg, args.n, args.seed)
    _emit({"dataset": args.dataset, "scenes": args.n, "seed": args.seed,
           "background": cfg.background_source, "out": out})
    return 0


def _run_seed(base: int, index: int) -> int:
    return base + index


def cmd_train(args) -> int:
    from .evalkit import aggregate_runs
    from .trainer import run_experiment

    spec = load_experiment(args.config, args.set, args.runs, args.out)
    spec.output_dir.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        if rec.odp_eval is not None:
            logger.info("step %d odp %.1f", rec.step + 1, rec.odp_eval)

    summaries, rows = [], []
    for k in range(spec.runs):
        cfg = dataclasses.replace(spec.train, rng_seed=_run_seed(spec.train.rng_seed, k))
        run_dir = run_experiment(cfg, spec.data, spec.output_dir / f"run_{k}", resume=not args.fresh,
                                 progress=progress)
        s = json.loads((run_dir / "summary.json").read_text())
        summaries.append(s)
        rows.append([k, cfg.rng_seed, s["max_odp"], s["best_step"], s["final_odp"], s["stable"]])
    agg = aggregate_runs(summaries)
    aggregate = {"runs": spec.runs, "mean_odp": agg.mean, "std_odp": agg.std, "stability": agg.stability_rate,
                 "per_run": [dict(zip(["run", "seed", "max_odp", "best_step", "final_odp", "stable"], r))
                             for r in rows]}
    (spec.output_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=2))
    _table(["run", "seed", "max_odp", "best_step", "final_odp", "stable"], rows)
    print("---")
    _emit({"mean_odp": agg.mean, "std_odp": agg.std, "stability": agg.stability_rate})
    return 0


def _checkpoint_dir(path: Path) -> Path:
    from .trainer import latest_checkpoint

    if (path / "params.pt").exists():
        return path
    ckpt = latest_checkpoint(path)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoint found at {path}")
    return ckpt


def cmd_eval(args) -> int:
    import numpy as np

    from . import evalkit, synthdata, trainer

    ckpt = _checkpoint_dir(Path(args.checkpoint))
    state, meta = trainer.load_checkpoint(ckpt)
    if args.dataset:
        scenes = synthdata.read_dataset(args.dataset)
        source = args.dataset
    else:
        run_cfg = ckpt.parent.parent / "config.json"
        if not run_cfg.exists():
            raise FileNotFoundError(f"{run_cfg} missing; pass --dataset explicitly")
        data = synthdata.DatasetConfig.from_dict(json.loads(run_cfg.read_text())["data"])
        cfg = state.config
        scenes = synthdata.sample_scenes(data, cfg.data_seed, cfg.eval_size, start=trainer.VALIDATION_OFFSET)
        source = "validation"
    if not scenes:
        raise FileNotFoundError("evaluation dataset is empty")
    size = state.image_size
    if scenes[0].image.shape[0] != size:
        raise ConfigError(f"dataset images are {scenes[0].image.shape[0]}px, checkpoint expects {size}px")
    preds = trainer.predict_masks(state, np.stack([s.image for s in scenes]).astype(np.float32))
    summary = evalkit.odp([evalkit.EvalCase(p, s.object_masks) for p, s in zip(preds, scenes)], args.method)
    if args.report:
        evalkit.write_report(args.report, summary, {"checkpoint": str(ckpt), "step": meta["step"], "dataset": source})
    if args.csv:
        evalkit.write_csv(args.csv, summary)
    _emit({"checkpoint": ckpt, "step": meta["step"], "dataset": source, "cases": len(scenes), "odp": summary.odp})
    return 0


def cmd_flow_gt(args) -> int:
    from .flowgt import export_masks

    kwargs = {"residual_threshold": args.residual_threshold, "merge_threshold": args.merge_threshold}
    if args.min_area is not None:
        kwargs["min_area"] = args.min_area
    out = export_masks(args.flo, args.out, **kwargs)
    manifest = json.loads((out / "manifest.json").read_text())
    _table(["object", "mask", "area"], [[i, o["mask"], o["area"]] for i, o in enumerate(manifest["objects"])])
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_run

    for path in plot_run(args.run_dir, args.out, args.format):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialize a synthetic dataset as PNGs")
    g.add_argument("--dataset", required=True, choices=["squares", "noisy_squares", "easy_squares"])
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"output directory (default ${DATA_ROOT_ENV}/<dataset>)")
    g.add_argument("--cifar", help="directory of CIFAR-10 binary batches")
    g.add_argument("--image-size", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one or more runs from a TOML experiment file")
    t.add_argument("--config", help="TOML file with [train], [data] and [run] tables")
    t.add_argument("--runs", type=int)
    t.add_argument("--out")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ODP of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory or run directory")
    e.add_argument("--dataset", help="labelled dataset directory (default: the run's validation split)")
    e.add_argument("--method", choices=["auto", "exhaustive", "greedy"], default="auto")
    e.add_argument("--report", help="write a JSON report here")
    e.add_argument("--csv", help="write per-case CSV here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flow-gt", help="object masks from a .flo optical flow file")
    f.add_argument("flo")
    f.add_argument("out")
    f.add_argument("--residual-threshold", type=float, default=0.1)
    f.add_argument("--merge-threshold", type=float, default=0.5)
    f.add_argument("--min-area", type=int)
    f.set_defaults(func=cmd_flow_gt)

    pl = sub.add_parser("plot", help="loss, ODP and sample figures for a run directory")
    pl.add_argument("run_dir")
    pl.add_argument("--out")
    pl.add_argument("--format", choices=["png", "svg", "pdf"], default="png")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"cpgan: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ParseError, NonFiniteLossError, OSError) as exc:
        print(f"cpgan: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
