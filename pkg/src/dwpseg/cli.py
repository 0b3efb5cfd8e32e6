"""``dwpseg`` command line: generate data, train source nets, build the prior, run protocols, report.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Set ``DWPSEG_LOG`` (DEBUG, INFO, WARNING) to change output verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

import dwpseg
from dwpseg import data as data_mod
from dwpseg import kernel_bank
from dwpseg.architectures import DETERMINISTIC, NetworkSpec, load_checkpoint, save_checkpoint
from dwpseg.dwp import VAEHyperparams, load_bundle, save_bundle
from dwpseg.errors import ConfigError, FormatError
from dwpseg.experiments import (
    METHODS,
    ExperimentConfig,
    RunResult,
    TrainHyperparams,
    build_prior_bundle,
    run_protocol,
    train_source_networks,
)

log = logging.getLogger("dwpseg")

VOLUME_SUFFIX = ".dwpv"
CHECKPOINT_SUFFIX = ".dwpn"


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


# --------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class SourceSettings:
    n_nets: int = 4
    cycles: int = 1
    val_fraction: float = 0.1
    seed: int = 0


@dataclasses.dataclass
class ProtocolSettings:
    train_sizes: list = dataclasses.field(default_factory=lambda: [5, 10, 15, 20])
    test_size: int = 50
    n_splits: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    kl_weight: float = 1.0
    lr_psi: Optional[float] = None
    threshold: float = 0.5
    mc_samples: int = 0


@dataclasses.dataclass
class NetworkSettings:
    base_widths: list = dataclasses.field(default_factory=lambda: [16, 32, 64])
    volume_shape: list = dataclasses.field(default_factory=lambda: [32, 32, 32])


@dataclasses.dataclass
class VAESettings(VAEHyperparams):
    seed: int = 0


_SECTIONS = {
    "train": TrainHyperparams,
    "vae": VAESettings,
    "source": SourceSettings,
    "protocol": ProtocolSettings,
    "network": NetworkSettings,
}


@dataclasses.dataclass
class RunConfig:
    train: TrainHyperparams = dataclasses.field(default_factory=TrainHyperparams)
    vae: VAESettings = dataclasses.field(default_factory=VAESettings)
    source: SourceSettings = dataclasses.field(default_factory=SourceSettings)
    protocol: ProtocolSettings = dataclasses.field(default_factory=ProtocolSettings)
    network: NetworkSettings = dataclasses.field(default_factory=NetworkSettings)

    @classmethod
    def from_mapping(cls, doc: Optional[dict]) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping of sections")
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; allowed {sorted(_SECTIONS)}")
        parts = {}
        for name, typ in _SECTIONS.items():
            sec = doc.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = sorted(set(sec) - allowed)
            if bad:
                raise ConfigError(f"unknown keys {bad} in section {name!r}")
            try:
                parts[name] = typ(**sec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return cls(**parts)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_mapping(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(base_widths=tuple(self.network.base_widths), mode=DETERMINISTIC)


# --------------------------------------------------------------------------
# helpers


def _prepare_out_dir(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise UsageError(f"--out {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"--out {path} is not empty; pass --force to write into it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_repro(out_dir: Path, command: str, cfg: RunConfig, seed, argv) -> None:
    record = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "dwpseg_version": dwpseg.__version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "python": platform.python_version(),
    }
    with open(out_dir / "repro.json", "w") as fh:
        json.dump(record, fh, indent=1)


def load_dataset(path, volume_shape=None) -> list:
    """Every volume file in ``path`` (sorted by name), preprocessed when ``volume_shape`` is given."""
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix == VOLUME_SUFFIX or p.suffix.lower() in data_mod.LOADERS)
    if not files:
        raise UsageError(f"no volume files in {path}")
    vols = [data_mod.load_volume(p) for p in files]
    if volume_shape is not None:
        vols = [data_mod.preprocess(v, volume_shape) for v in vols]
    return vols


def _checkpoint_files(path: Path) -> list:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise UsageError(f"checkpoint path {path} does not exist")
    files = sorted(path.glob(f"*{CHECKPOINT_SUFFIX}"))
    if not files:
        raise UsageError(f"no checkpoints ({CHECKPOINT_SUFFIX}) in {path}")
    return files


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg: RunConfig) -> int:
    try:
        preset = data_mod.get_preset(args.preset)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = _prepare_out_dir(Path(args.out), args.force)
    vols = data_mod.generate(preset, args.n, args.seed)
    entries = []
    for i, v in enumerate(vols):
        name = f"vol_{i:04d}{VOLUME_SUFFIX}"
        data_mod.save_volume(v, out / name)
        entries.append({"file": name, "seed": v.seed, "domain": v.domain, "shape": list(v.shape),
                        "lesion_voxels": int(v.mask.sum())})
    with open(out / "manifest.json", "w") as fh:
        json.dump({"preset": dataclasses.asdict(preset), "seed": args.seed, "n": args.n, "volumes": entries}, fh, indent=1)
    _write_repro(out, "generate", cfg, args.seed, sys.argv)
    print(f"wrote {args.n} volumes to {out}")
    return 0


def cmd_train_source(args, cfg: RunConfig) -> int:
    n_nets = args.n_nets if args.n_nets is not None else cfg.source.n_nets
    cycles = args.cycles if args.cycles is not None else cfg.source.cycles
    seed = args.seed if args.seed is not None else cfg.source.seed
    if n_nets < 1 or cycles < 0:
        raise UsageError("--n-nets must be >= 1 and --cycles >= 0")
    dataset = load_dataset(args.data, cfg.network.volume_shape)
    if len(dataset) < 2:
        raise UsageError("source training needs at least two volumes")
    out = _prepare_out_dir(Path(args.out), args.force)

    def save(snap):
        path = out / f"{snap.checkpoint_id}{CHECKPOINT_SUFFIX}"
        save_checkpoint(snap.net, path, {"net": snap.net_index, "cycle": snap.cycle, "val_dsc": snap.val_dsc})
        print(f"checkpoint {path.name} val_dsc={snap.val_dsc:.4f}", flush=True)

    train_source_networks(dataset, n_nets, cycles, cfg.train, cfg.network_spec(), seed,
                          cfg.source.val_fraction, on_snapshot=save)
    _write_repro(out, "train-source", cfg, seed, sys.argv)
    return 0


def cmd_build_prior(args, cfg: RunConfig) -> int:
    files = _checkpoint_files(Path(args.checkpoints))
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    seed = args.seed if args.seed is not None else cfg.vae.seed
    nets = []
    for f in files:
        net = load_checkpoint(f)
        if net.mode != DETERMINISTIC:
            raise UsageError(f"{f} is not a deterministic checkpoint")
        nets.append((f.stem, net))
    hp = VAEHyperparams(**{k: v for k, v in dataclasses.asdict(cfg.vae).items() if k != "seed"})
    bundle, bank = build_prior_bundle(nets, hp, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out, {"checkpoints": [f.name for f in files], "seed": seed})
    kernel_bank.save(bank, out.with_suffix(".bank"))
    _write_repro(out.parent, "build-prior", cfg, seed, sys.argv)
    print(f"wrote prior bundle with {len(bundle.vaes)} VAEs to {out}; kernel counts {bank.counts()}")
    return 0


def cmd_sample_prior(args, cfg: RunConfig) -> int:
    bundle = load_bundle(args.prior)
    if args.group not in bundle.vaes:
        raise UsageError(f"group {args.group} not in bundle (groups {sorted(bundle.vaes)})")
    with torch.no_grad():
        kernels = bundle.vaes[args.group].sample(args.n, torch.Generator().manual_seed(args.seed))
    arr = kernels.numpy()
    if args.denormalize:
        shift, scale = bundle.norm_constants.get(args.group, (0.0, 1.0))
        arr = arr * scale + shift
    np.save(args.out, arr)
    print(f"wrote {arr.shape[0]} kernels to {args.out} (range {arr.min():.3f} .. {arr.max():.3f})")
    return 0


def cmd_run(args, cfg: RunConfig) -> int:
    p = cfg.protocol
    train_sizes = args.train_sizes or p.train_sizes
    n_splits = args.splits if args.splits is not None else p.n_splits
    seed = args.seed if args.seed is not None else p.seed
    test_size = args.test_size if args.test_size is not None else p.test_size
    threshold = args.threshold if args.threshold is not None else p.threshold
    # prerequisites first, before anything slow
    if args.method in ("pr", "prf") and not args.source_ckpt:
        raise ConfigError(f"method {args.method} needs --source-ckpt")
    if args.method == "dwp" and not args.prior:
        raise ConfigError("method dwp needs --prior")
    for flag, val in (("--source-ckpt", args.source_ckpt), ("--prior", args.prior)):
        if val and not Path(val).is_file():
            raise ConfigError(f"{flag} {val} does not exist")
    dataset = load_dataset(args.data, cfg.network.volume_shape)
    out = _prepare_out_dir(Path(args.out), args.force)
    source = load_checkpoint(args.source_ckpt) if args.source_ckpt and args.method in ("pr", "prf") else None
    prior = load_bundle(args.prior) if args.prior and args.method == "dwp" else None
    net_spec = source.spec if source is not None else cfg.network_spec()
    exp = ExperimentConfig(
        method=args.method, train_sizes=list(train_sizes), test_size=test_size, n_splits=n_splits, seed=seed,
        hp=cfg.train, network=net_spec, source_checkpoint=source, prior=prior, val_fraction=p.val_fraction,
        kl_weight=p.kl_weight, lr_psi=p.lr_psi, threshold=threshold, mc_samples=p.mc_samples,
    )
    result = run_protocol(exp, dataset, parallel=args.parallel)
    result.to_json(out / "results.json")
    table = result.table()
    (out / "table.txt").write_text(table + "\n")
    with open(out / "records.csv", "w") as fh:
        fh.write("method,train_size,split,dsc_mean,dsc_std,iou_mean,iou_std,n_test\n")
        for r in result.records:
            fh.write(f"{r.method},{r.train_size},{r.split},{r.report.to_csv_line()}\n")
    _write_repro(out, "run", cfg, seed, sys.argv)
    print(table)
    return 0


def plot_results(result: RunResult, path, metric: str = "dsc") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = result.aggregate()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in [m for m in METHODS if any(k[0] == m for k in agg)]:
        sizes = sorted(s for m, s in agg if m == method)
        means = [agg[(method, s)][f"{metric}_mean"] for s in sizes]
        (line,) = ax.plot(sizes, means, marker="o", label=method.upper() if method != "prf" else "PRf")
        pts = [(r.train_size, getattr(r.report, f"{metric}_mean")) for r in result.records if r.method == method]
        ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=10, alpha=0.5, color=line.get_color())
    ax.set_xlabel("train size")
    ax.set_ylabel(metric.upper())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_report(args, cfg: RunConfig) -> int:
    if not args.results:
        raise UsageError("need at least one --results file")
    results = []
    for path in args.results:
        if not Path(path).is_file():
            raise UsageError(f"results file {path} does not exist")
        results.append(RunResult.from_json(path))
    merged = RunResult.merged(results)
    table = merged.table(args.metric)
    print(table)
    if args.table_out:
        Path(args.table_out).write_text(table + "\n")
    if args.plot:
        plot_results(merged, args.plot, args.metric)
    return 0


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dwpseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dwpseg {dwpseg.__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML config file (sections: train, vae, source, protocol, network)")
        p.set_defaults(fn=fn)
        return p

    p = add("generate", cmd_generate, "write a synthetic dataset")
    p.add_argument("--preset", required=True, help=f"one of {sorted(data_mod.PRESETS)}")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("train-source", cmd_train_source, "train source networks with cyclical restarts")
    p.add_argument("--data", required=True)
    p.add_argument("--n-nets", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("build-prior", cmd_build_prior, "harvest kernels and train the per-group VAEs")
    p.add_argument("--checkpoints", required=True, help="checkpoint file or directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="prior bundle path")
    p.add_argument("--force", action="store_true")

    p = add("sample-prior", cmd_sample_prior, "draw kernels from one group's VAE")
    p.add_argument("--prior", required=True)
    p.add_argument("--group", type=int, required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--denormalize", action="store_true")
    p.add_argument("--out", required=True, help=".npy output path")

    p = add("run", cmd_run, "run one method's protocol on a target dataset")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--data", required=True)
    p.add_argument("--train-sizes", type=int, nargs="+")
    p.add_argument("--splits", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--source-ckpt")
    p.add_argument("--prior")
    p.add_argument("--parallel", type=int, default=0, help="worker processes for splits")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("report", cmd_report, "merge results files into a table and plot")
    p.add_argument("--results", nargs="*", default=[])
    p.add_argument("--metric", choices=("dsc", "iou"), default="dsc")
    p.add_argument("--plot", help="figure path (.svg or .png)")
    p.add_argument("--table-out")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DWPSEG_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        cfg = RunConfig.load(args.config)
        return args.fn(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"dwpseg: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"dwpseg: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
