"""Harvesting 3x3x3 kernel slices from trained U-Nets into per-group banks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dwpseg.container import read_container, write_container

BANK_MAGIC = b"DWPK"
BANK_VERSION = 1
NORM_LIMIT = 0.99


@dataclass
class KernelBank:
    """Kernel slices ``[n_g, 1, 3, 3, 3]`` per group, with provenance and normalisation.

    ``norm_constants[g] = (shift, scale)`` means the stored kernels equal
    ``(w - shift) / scale``; an empty mapping means the bank is unnormalised.
    """

    groups: Dict[int, np.ndarray]
    provenance: List[Tuple[str, str]] = field(default_factory=list)
    norm_constants: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        groups = {}
        for g, arr in self.groups.items():
            arr = np.asarray(arr, dtype=np.float32).reshape(-1, 1, 3, 3, 3)
            groups[int(g)] = arr
        self.groups = dict(sorted(groups.items()))
        self.provenance = [tuple(p) for p in self.provenance]
        self.norm_constants = {int(g): (float(s), float(c)) for g, (s, c) in self.norm_constants.items()}

    @property
    def normalized(self) -> bool:
        return bool(self.norm_constants)

    def counts(self) -> Dict[int, int]:
        return {g: int(a.shape[0]) for g, a in self.groups.items()}

    def total(self) -> int:
        return sum(self.counts().values())

    def denormalize(self, group: int, kernels: Optional[np.ndarray] = None) -> np.ndarray:
        """Map normalised kernels of ``group`` (the stored ones by default) back to weight units."""
        x = self.groups[group] if kernels is None else kernels
        shift, scale = self.norm_constants.get(group, (0.0, 1.0))
        return (np.asarray(x, dtype=np.float64) * scale + shift)


def collect(net, group_map: Mapping[str, int], checkpoint_id: str = "net") -> KernelBank:
    """One ``[1, 3, 3, 3]`` slice per (output, input) channel pair of every 3x3x3 layer."""
    missing = sorted(set(net.dwp_layer_set) - set(group_map))
    if missing:
        raise ValueError(f"group map has no entry for layers {missing}")
    per_group: Dict[int, list] = {}
    provenance = []
    for lid, conv in net.layers.items():
        if lid not in net.dwp_layer_set:
            continue
        w = conv.point_weight().detach().cpu().numpy().astype(np.float32)
        per_group.setdefault(int(group_map[lid]), []).append(w.reshape(-1, 1, 3, 3, 3))
        provenance.append((checkpoint_id, lid))
    groups = {g: np.concatenate(parts) for g, parts in per_group.items()}
    return KernelBank(groups, provenance)


def merge(banks: Sequence[KernelBank]) -> KernelBank:
    """Concatenate banks group by group (unnormalised banks only)."""
    if not banks:
        raise ValueError("nothing to merge")
    if any(b.normalized for b in banks):
        raise ValueError("merge banks before normalising them")
    if len(banks) == 1:
        return banks[0]
    gids = sorted(set().union(*(b.groups for b in banks)))
    groups = {}
    for g in gids:
        parts = [b.groups[g] for b in banks if g in b.groups]
        groups[g] = np.concatenate(parts)
    provenance = [p for b in banks for p in b.provenance]
    return KernelBank(groups, provenance)


def normalize(bank: KernelBank) -> KernelBank:
    """Affinely map each group into [-0.99, 0.99]; a bank that is already normalised is returned as is."""
    if bank.normalized:
        return bank
    groups, consts = {}, {}
    for g, arr in bank.groups.items():
        if arr.shape[0] == 0:
            groups[g], consts[g] = arr, (0.0, 1.0)
            continue
        x = arr.astype(np.float64)
        lo, hi = float(x.min()), float(x.max())
        if hi - lo <= 0.0:
            shift, scale = float(x.mean()), 1.0
        else:
            shift, scale = 0.5 * (lo + hi), 0.5 * (hi - lo) / NORM_LIMIT
        y = np.clip((x - shift) / scale, -NORM_LIMIT, NORM_LIMIT)
        groups[g], consts[g] = y.astype(np.float32), (shift, scale)
    return KernelBank(groups, list(bank.provenance), consts)


def save(bank: KernelBank, path) -> None:
    meta = {
        "group_sizes": {str(g): n for g, n in bank.counts().items()},
        "norm_constants": {str(g): list(c) for g, c in bank.norm_constants.items()},
        "provenance": [list(p) for p in bank.provenance],
    }
    arrays = {f"group_{g}": bank.groups[g] for g in bank.groups}
    write_container(path, BANK_MAGIC, BANK_VERSION, meta, arrays)


def load(path) -> KernelBank:
    from dwpseg.errors import FormatError

    meta, arrays = read_container(path, BANK_MAGIC, BANK_VERSION)
    try:
        sizes = {int(g): int(n) for g, n in meta["group_sizes"].items()}
        groups = {g: arrays[f"group_{g}"] for g in sizes}
        consts = {int(g): tuple(c) for g, c in meta["norm_constants"].items()}
        provenance = [tuple(p) for p in meta["provenance"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed kernel-bank header ({exc})") from exc
    for g, n in sizes.items():
        if groups[g].shape[0] != n:
            raise FormatError(f"{path}: group {g} holds {groups[g].shape[0]} kernels, header says {n}")
    return KernelBank(groups, provenance, consts)
