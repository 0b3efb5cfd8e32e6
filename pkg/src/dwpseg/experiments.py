"""Training protocols: random init (RI), pretrain/fine-tune (PR), pretrain with a
frozen middle (PRf) and variational training under the kernel prior (DWP).

All randomness flows from ``(base seed, split, train size, method, purpose)``
through :class:`numpy.random.SeedSequence`, so a run's results do not depend
on the order in which runs execute.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from dwpseg.architectures import (
    DETERMINISTIC,
    VARIATIONAL,
    NetworkSpec,
    UNet3D,
    build_unet,
    freeze_middle,
    he_init,
    resolution_groups,
)
from dwpseg.data import Volume, stack
from dwpseg.dwp import PriorBundle, VAEHyperparams, make_dwp_optimizer, train_dwp_step, train_vae
from dwpseg.errors import ConfigError, SchedulerStateError
from dwpseg.kernel_bank import KernelBank, collect, merge, normalize
from dwpseg.metrics import MetricReport, combined_loss, evaluate, foreground_probs

log = logging.getLogger(__name__)

METHODS = ("ri", "pr", "prf", "dwp")
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}
_PURPOSE = {"split": 0, "select": 1, "init": 2, "train": 3, "source": 4, "vae": 5}
RESULTS_SCHEMA_VERSION = 1

__all__ = [
    "METHODS",
    "ExperimentConfig",
    "PlateauScheduler",
    "PlateauState",
    "RunResult",
    "TrainHyperparams",
    "build_prior_bundle",
    "cyclical_restart",
    "he_init",
    "plateau_step",
    "run_protocol",
    "split_indices",
    "train_deterministic",
    "train_dwp",
    "train_source_networks",
]


# --------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class PlateauState:
    lr0: float = 1e-3
    patience: int = 10
    factor: float = 0.1
    min_delta: float = 1e-4
    stop_lr: float = 1e-6
    lr: float = 1e-3
    best: float = math.inf
    num_bad: int = 0
    epoch: int = -1

    @classmethod
    def start(cls, lr0=1e-3, patience=10, factor=0.1, min_delta=1e-4, stop_lr=1e-6) -> "PlateauState":
        if not 0.0 < factor < 1.0:
            raise ValueError("plateau factor must lie in (0, 1)")
        if not stop_lr < lr0:
            raise ValueError("stop_lr must be below lr0")
        return cls(lr0, patience, factor, min_delta, stop_lr, lr0)

    @property
    def stopped(self) -> bool:
        return self.lr <= self.stop_lr * (1.0 + 1e-9)


def plateau_step(state: PlateauState, val_loss: float) -> Tuple[PlateauState, float, bool]:
    """Advance one epoch (epochs count from 0).

    An epoch improves when ``val_loss < best - min_delta``; NaN never
    improves. Once more than ``patience`` consecutive epochs fail to improve,
    lr is multiplied by ``factor`` and the counter restarts. ``stop`` is
    raised when lr has decayed to ``stop_lr``.
    """
    loss = float(val_loss)
    if not math.isnan(loss) and loss < state.best - state.min_delta:
        best, bad = loss, 0
    else:
        best, bad = state.best, state.num_bad + 1
    lr = state.lr
    if bad > state.patience:
        lr, bad = lr * state.factor, 0
    new = replace(state, lr=lr, best=best, num_bad=bad, epoch=state.epoch + 1)
    return new, lr, new.stopped


def cyclical_restart(state: PlateauState, force: bool = False) -> PlateauState:
    """Raise lr back to lr0 on a converged run and clear the plateau bookkeeping.

    ``force`` allows restarting a run that ended on its epoch budget instead.
    """
    if not (state.stopped or force):
        raise SchedulerStateError("restart requested before the schedule converged")
    return replace(state, lr=state.lr0, best=math.inf, num_bad=0)


class PlateauScheduler:
    """Mutable convenience wrapper around :func:`plateau_step`."""

    def __init__(self, lr0=1e-3, patience=10, factor=0.1, min_delta=1e-4, stop_lr=1e-6, state: Optional[PlateauState] = None):
        self.state = state if state is not None else PlateauState.start(lr0, patience, factor, min_delta, stop_lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    def step(self, val_loss: float) -> Tuple[float, bool]:
        self.state, lr, stop = plateau_step(self.state, val_loss)
        return lr, stop

    def restart(self, force: bool = False) -> None:
        self.state = cyclical_restart(self.state, force)


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainHyperparams:
    batch_size: int = 2
    lr0: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-4
    stop_lr: float = 1e-6
    max_epochs: int = 500

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if not self.stop_lr < self.lr0:
            raise ValueError("stop_lr must be below lr0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def scheduler(self) -> PlateauScheduler:
        return PlateauScheduler(self.lr0, self.plateau_patience, self.plateau_factor, self.plateau_min_delta, self.stop_lr)


@dataclass
class TrainResult:
    net: UNet3D
    history: List[dict]
    scheduler: PlateauScheduler
    best_val_loss: float
    epochs: int


def _tensors(volumes: Sequence[Volume], dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    images, masks = stack(volumes)
    return torch.as_tensor(images, dtype=dtype), torch.as_tensor(masks, dtype=dtype)


def _val_loss(net: UNet3D, images: torch.Tensor, masks: torch.Tensor) -> float:
    with torch.no_grad():
        losses = [float(combined_loss(foreground_probs(net(images[i : i + 1])), masks[i : i + 1])) for i in range(images.shape[0])]
    return float(np.mean(losses))


def _snapshot(net) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def _fit(net, train_set, val_set, hp: TrainHyperparams, generator, scheduler, step_fn, tag: str) -> TrainResult:
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    dtype = next(net.parameters()).dtype
    x, y = _tensors(train_set, dtype)
    xv, yv = _tensors(val_set, dtype)
    sched = scheduler or hp.scheduler()
    history = []
    best, best_state = math.inf, None
    epochs = 0
    n = x.shape[0]
    for epoch in range(hp.max_epochs):
        perm = torch.randperm(n, generator=generator)
        train_losses = []
        for start in range(0, n, hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            train_losses.append(step_fn(x[idx], y[idx], sched.lr))
        val = _val_loss(net, xv, yv)
        if val < best:
            best, best_state = val, _snapshot(net)
        lr, stop = sched.step(val)
        epochs = epoch + 1
        rec = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(train_losses)), "val_loss": val}
        history.append(rec)
        log.info("EPOCH tag=%s epoch=%d lr=%.3e train_loss=%.6f val_loss=%.6f", tag, epoch, lr, rec["train_loss"], val)
        if stop:
            break
    if best_state is not None:
        net.load_state_dict(best_state)
    return TrainResult(net, history, sched, best, epochs)


def train_deterministic(net: UNet3D, train_set: Sequence[Volume], val_set: Sequence[Volume],
                        hp: Optional[TrainHyperparams] = None, generator: Optional[torch.Generator] = None,
                        scheduler: Optional[PlateauScheduler] = None, optimizer: Optional[torch.optim.Optimizer] = None,
                        tag: str = "det") -> TrainResult:
    """Adam on the 0.99 Dice + 0.01 CE loss under the plateau schedule; keeps the best-validation weights."""
    hp = hp or TrainHyperparams()
    if net.mode != DETERMINISTIC:
        raise ValueError("train_deterministic expects a deterministic network")
    params = [p for p in net.parameters() if p.requires_grad]
    opt = optimizer or torch.optim.Adam(params, lr=hp.lr0)

    def step(xb, yb, lr):
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss = combined_loss(foreground_probs(net(xb)), yb)
        loss.backward()
        opt.step()
        return float(loss.detach())

    return _fit(net, train_set, val_set, hp, generator, scheduler, step, tag)


def train_dwp(net: UNet3D, bundle: Optional[PriorBundle], train_set: Sequence[Volume], val_set: Sequence[Volume],
              hp: Optional[TrainHyperparams] = None, generator: Optional[torch.Generator] = None,
              kl_weight: float = 1.0, lr_psi: Optional[float] = None, tag: str = "dwp") -> TrainResult:
    """Stochastic variational inference on the approximate ELBO; validation uses the posterior mean."""
    hp = hp or TrainHyperparams()
    if net.mode != VARIATIONAL:
        raise ValueError("train_dwp expects a variational network")
    lr_psi = hp.lr0 if lr_psi is None else lr_psi
    opt = make_dwp_optimizer(net, bundle, hp.lr0, lr_psi)
    n_data = len(train_set)

    def step(xb, yb, lr):
        for g in opt.param_groups:
            g["lr"] = lr if g.get("name") == "theta" else lr * lr_psi / hp.lr0
        return -train_dwp_step(net, bundle, xb, yb, n_data, opt, generator, kl_weight)

    return _fit(net, train_set, val_set, hp, generator, None, step, tag)


# --------------------------------------------------------------------------
# seeds and splits


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(*parts: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


def split_indices(n_total: int, train_size: int, test_size: int, seed: int, split: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed test set per split; ``train_size`` images drawn from the rest. Method-independent."""
    if train_size + test_size > n_total:
        raise ConfigError(f"train_size {train_size} + test_size {test_size} exceeds dataset size {n_total}")
    perm = np.random.default_rng(derive_seed(seed, _PURPOSE["split"], split)).permutation(n_total)
    test, pool = perm[:test_size], perm[test_size:]
    sel_rng = np.random.default_rng(derive_seed(seed, _PURPOSE["select"], split, train_size))
    train = sel_rng.choice(pool, size=train_size, replace=False)
    return np.sort(train), np.sort(test)


def carve_validation(items: Sequence, fraction: float = 0.2) -> Tuple[list, list]:
    """Last ``max(1, round(fraction * n))`` items become validation; a single item serves as both."""
    items = list(items)
    if len(items) == 1:
        return items, items
    n_val = min(max(1, int(round(fraction * len(items)))), len(items) - 1)
    return items[:-n_val], items[-n_val:]


# --------------------------------------------------------------------------
# source networks and prior construction


@dataclass
class SourceSnapshot:
    net: UNet3D
    net_index: int
    cycle: int
    val_dsc: float
    epochs: int

    @property
    def checkpoint_id(self) -> str:
        return f"net{self.net_index}_cycle{self.cycle}"


def train_source_networks(source: Sequence[Volume], n_nets: int, n_cycles: int, hp: TrainHyperparams,
                          spec: NetworkSpec, seed: int, val_fraction: float = 0.1,
                          on_snapshot: Optional[Callable[[SourceSnapshot], None]] = None) -> List[SourceSnapshot]:
    """Train ``n_nets`` U-Nets from different seeds, each converged ``1 + n_cycles`` times.

    After every convergence the best-validation weights are snapshotted,
    lr jumps back to lr0 and training continues from those weights.
    """
    source = list(source)
    n_val = max(1, int(round(val_fraction * len(source))))
    train_set, val_set = source[:-n_val], source[-n_val:]
    snaps = []
    for k in range(n_nets):
        gen = torch_generator(seed, _PURPOSE["source"], k)
        net = build_unet(replace(spec, mode=DETERMINISTIC), generator=gen)
        sched = hp.scheduler()
        opt = torch.optim.Adam(net.parameters(), lr=hp.lr0)
        for cycle in range(n_cycles + 1):
            if cycle > 0:
                sched.restart(force=True)
            res = train_deterministic(net, train_set, val_set, hp, gen, sched, opt, tag=f"source{k}.{cycle}")
            rep = evaluate(net, val_set)
            snap = SourceSnapshot(copy.deepcopy(net), k, cycle, rep.dsc_mean, res.epochs)
            log.info("CHECKPOINT net=%d cycle=%d epochs=%d val_dsc=%.4f", k, cycle, res.epochs, rep.dsc_mean)
            snaps.append(snap)
            if on_snapshot is not None:
                on_snapshot(snap)
    return snaps


def build_prior_bundle(nets: Sequence[Tuple[str, UNet3D]], hp: Optional[VAEHyperparams] = None, seed: int = 0,
                       group_map: Optional[Dict[str, int]] = None) -> Tuple[PriorBundle, KernelBank]:
    """Collect kernels from ``(checkpoint_id, net)`` pairs, normalise per group, fit one VAE per group."""
    if not nets:
        raise ValueError("need at least one source network")
    hp = hp or VAEHyperparams()
    group_map = group_map or resolution_groups(nets[0][1].spec)
    bank = normalize(merge([collect(net, group_map, cid) for cid, net in nets]))
    for g in sorted(set(group_map.values())):
        if bank.counts().get(g, 0) == 0:
            raise ValueError(f"kernel group {g} is empty")
    vaes = {}
    for g in sorted(bank.groups):
        vaes[g] = train_vae(bank.groups[g], hp, torch_generator(seed, _PURPOSE["vae"], g), group=g)
    return PriorBundle(vaes, dict(group_map), dict(bank.norm_constants)), bank


# --------------------------------------------------------------------------
# protocols


@dataclass
class ExperimentConfig:
    method: str
    train_sizes: Sequence[int] = (5, 10, 15, 20)
    test_size: int = 50
    n_splits: int = 3
    seed: int = 0
    hp: TrainHyperparams = field(default_factory=TrainHyperparams)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    source_checkpoint: Optional[UNet3D] = None
    prior: Optional[PriorBundle] = None
    val_fraction: float = 0.2
    kl_weight: float = 1.0
    lr_psi: Optional[float] = None
    threshold: float = 0.5
    mc_samples: int = 0
    keep_models: bool = False

    def validate(self, dataset_size: Optional[int] = None) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method in ("pr", "prf") and self.source_checkpoint is None:
            raise ConfigError(f"method {self.method} needs a source checkpoint")
        if self.method == "dwp" and self.prior is None:
            raise ConfigError("method dwp needs a prior bundle")
        if self.n_splits < 1 or not self.train_sizes:
            raise ConfigError("need at least one split and one train size")
        if any(m < 1 for m in self.train_sizes):
            raise ConfigError("train sizes must be positive")
        if dataset_size is not None and max(self.train_sizes) + self.test_size > dataset_size:
            raise ConfigError(
                f"largest train size {max(self.train_sizes)} + test size {self.test_size} exceeds dataset size {dataset_size}")


@dataclass
class SplitRecord:
    method: str
    train_size: int
    split: int
    report: MetricReport
    trainable_params: int
    total_params: int
    epochs: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplitRecord":
        d = dict(d)
        d["report"] = MetricReport.from_dict(d["report"])
        return cls(**d)


@dataclass
class RunResult:
    records: List[SplitRecord] = field(default_factory=list)
    models: Dict[tuple, tuple] = field(default_factory=dict, repr=False)

    def aggregate(self) -> Dict[Tuple[str, int], dict]:
        """Mean and (population) std over splits of the per-split mean DSC and IoU."""
        out = {}
        keys = sorted({(r.method, r.train_size) for r in self.records}, key=lambda k: (METHODS.index(k[0]) if k[0] in METHODS else 99, k[1]))
        for key in keys:
            rs = [r for r in self.records if (r.method, r.train_size) == key]
            d = np.array([r.report.dsc_mean for r in rs])
            i = np.array([r.report.iou_mean for r in rs])
            out[key] = {"dsc_mean": float(d.mean()), "dsc_std": float(d.std()),
                        "iou_mean": float(i.mean()), "iou_std": float(i.std()), "n_splits": len(rs)}
        return out

    def to_json(self, path) -> None:
        doc = {"schema_version": RESULTS_SCHEMA_VERSION, "records": [r.to_dict() for r in self.records]}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "RunResult":
        from dwpseg.errors import VersionError

        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != RESULTS_SCHEMA_VERSION:
            raise VersionError(f"{path}: results schema {doc.get('schema_version')!r}, expected {RESULTS_SCHEMA_VERSION}")
        return cls([SplitRecord.from_dict(r) for r in doc["records"]])

    @classmethod
    def merged(cls, results: Sequence["RunResult"]) -> "RunResult":
        return cls([r for res in results for r in res.records])

    def table(self, metric: str = "dsc") -> str:
        """Train sizes as rows, methods as columns, cells ``mean (std)``."""
        agg = self.aggregate()
        methods = [m for m in METHODS if any(k[0] == m for k in agg)]
        methods += sorted({k[0] for k in agg} - set(methods))
        sizes = sorted({k[1] for k in agg})
        head = ["Train size"] + [f"UNet-{m.upper() if m != 'prf' else 'PRf'}" for m in methods]
        rows = [head]
        for s in sizes:
            row = [str(s)]
            for m in methods:
                a = agg.get((m, s))
                row.append("-" if a is None else f"{a[metric + '_mean']:.2f} ({a[metric + '_std']:.2f})")
            rows.append(row)
        widths = [max(len(r[c]) for r in rows) for c in range(len(head))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def _run_one(cfg: ExperimentConfig, dataset: Sequence[Volume], train_size: int, split: int):
    train_idx, test_idx = split_indices(len(dataset), train_size, cfg.test_size, cfg.seed, split)
    train_set, val_set = carve_validation([dataset[i] for i in train_idx], cfg.val_fraction)
    test_set = [dataset[i] for i in test_idx]
    code = _METHOD_CODE[cfg.method]
    gen_init = torch_generator(cfg.seed, _PURPOSE["init"], split, train_size, code)
    gen_train = torch_generator(cfg.seed, _PURPOSE["train"], split, train_size, code)
    tag = f"{cfg.method}.m{train_size}.s{split}"
    bundle = None
    if cfg.method == "ri":
        net = build_unet(replace(cfg.network, mode=DETERMINISTIC), generator=gen_init)
    elif cfg.method in ("pr", "prf"):
        net = copy.deepcopy(cfg.source_checkpoint)
        if cfg.method == "prf":
            freeze_middle(net)
    else:
        net = build_unet(replace(cfg.network, mode=VARIATIONAL), generator=gen_init)
        bundle = copy.deepcopy(cfg.prior)
    total = sum(p.numel() for p in net.parameters())
    trainable = net.trainable_parameter_count()
    log.info("RUN %s trainable_params=%d total_params=%d train=%d val=%d test=%d",
             tag, trainable, total, len(train_set), len(val_set), len(test_set))
    if cfg.method == "dwp":
        res = train_dwp(net, bundle, train_set, val_set, cfg.hp, gen_train, cfg.kl_weight, cfg.lr_psi, tag=tag)
    else:
        res = train_deterministic(net, train_set, val_set, cfg.hp, gen_train, tag=tag)
    report = evaluate(net, test_set, cfg.threshold, mc_samples=cfg.mc_samples, generator=gen_train)
    log.info("RESULT %s dsc=%.4f iou=%.4f", tag, report.dsc_mean, report.iou_mean)
    record = SplitRecord(cfg.method, train_size, split, report, trainable, total, res.epochs)
    return record, (net, bundle)


def run_protocol(cfg: ExperimentConfig, dataset: Sequence[Volume], parallel: int = 0) -> RunResult:
    """Every (train size, split) of one method: split, select, build, train, evaluate.

    ``parallel > 1`` fans runs out to that many worker processes; results
    are identical to serial execution because seeds are derived per run.
    """
    cfg.validate(len(dataset))
    jobs = [(m, s) for m in cfg.train_sizes for s in range(cfg.n_splits)]
    result = RunResult()
    if parallel and parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        light = replace(cfg, keep_models=False)
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            outs = list(ex.map(_run_job, [(light, dataset, m, s) for m, s in jobs]))
        result.records.extend(outs)
        return result
    for m, s in jobs:
        record, model = _run_one(cfg, dataset, m, s)
        result.records.append(record)
        if cfg.keep_models:
            result.models[(m, s)] = model
    return result


def _run_job(args):
    cfg, dataset, m, s = args
    torch.set_num_threads(1)
    return _run_one(cfg, dataset, m, s)[0]
