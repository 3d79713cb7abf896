"""Turn coded sequences into training material for the three networks."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .frames import Frame, PartitionMaps, PatchSample, extract_patches
from .rfs import RfsConfig, RfsNet, compute_metrics, ground_truth_potential, select_references
from .training import RfsBatch


def _pool(urfs: Sequence[Frame], n: int, size: int) -> list:
    return list(urfs[max(0, n - size):n])


def rfs_batches(urfs: Sequence[Frame], raws: Sequence[Frame], config: RfsConfig = RfsConfig(),
                min_valid: int = 2) -> list[RfsBatch]:
    """One batch per URF holding its valid pool frames and their potentials.

    URFs with fewer than ``min_valid`` valid references are skipped, since a
    single normalised target carries no ranking signal.
    """
    by_index = {r.index: r for r in raws}
    batches = []
    for n, urf in enumerate(urfs):
        records = [r for r in compute_metrics(urf, _pool(urfs, n, config.pool_size), by_index,
                                              config.cc_threshold) if r.valid]
        if len(records) < min_valid:
            continue
        pool = {p.index: p for p in urfs[:n]}
        potentials = [ground_truth_potential(pool[r.pool_index], urf, by_index[urf.index]) for r in records]
        batches.append(RfsBatch(np.array([r.features for r in records]), np.array(potentials)))
    return batches


def rank_by_potential(urf: Frame, pool: Sequence[Frame], raws, config: RfsConfig) -> Optional[list[int]]:
    """Oracle selection by ground-truth potential (needs the raw target)."""
    records = [r for r in compute_metrics(urf, pool, raws, config.cc_threshold) if r.valid]
    if len(records) < config.num_selected:
        return None
    by_index = {p.index: p for p in pool}
    scored = [(ground_truth_potential(by_index[r.pool_index], urf, raws[urf.index]), r.pool_index)
              for r in records]
    scored.sort(key=lambda t: (-t[0], -t[1]))
    return [i for _, i in scored[:config.num_selected]]


def if_samples(raws: Sequence[Frame], urfs: Sequence[Frame], maps: Sequence[PartitionMaps],
               stride: int = 64, size: int = 64) -> list[PatchSample]:
    out = []
    for raw, urf, m in zip(raws, urfs, maps):
        out += extract_patches(raw, urf, m, (), stride=stride, size=size)
    return out


def mif_samples(raws: Sequence[Frame], urfs: Sequence[Frame], maps: Sequence[PartitionMaps],
                rfs_net: Optional[RfsNet] = None, config: RfsConfig = RfsConfig(),
                stride: int = 64, size: int = 64) -> list[PatchSample]:
    """Patches of frames for which ``M`` references can be selected.

    References come from the preceding URFs (no enhanced frames exist at
    training time) and are chosen by ``rfs_net``, or by the ground-truth
    potential when no network is given.
    """
    by_index = {r.index: r for r in raws}
    out = []
    for n, (raw, urf, m) in enumerate(zip(raws, urfs, maps)):
        pool = _pool(urfs, n, config.pool_size)
        if len(pool) < config.num_selected:
            continue
        if rfs_net is None:
            chosen = rank_by_potential(urf, pool, by_index, config)
        else:
            chosen = select_references(compute_metrics(urf, pool, by_index, config.cc_threshold), rfs_net, config)
        if chosen is None:
            continue
        refs = [next(p for p in pool if p.index == i) for i in chosen]
        out += extract_patches(raw, urf, m, refs, stride=stride, size=size)
    return out
