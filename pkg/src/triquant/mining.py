"""Offline grouped hard-negative mining, the online in-batch variant, and the
group-count decay schedule.

A triplet (a, p, n) is hard at the current embeddings when
delta - |z_a - z_n|^2 + |z_a - z_p|^2 > 0 with s(a,p)=1 and s(a,n)=0. Offline
mining partitions the train set into groups, walks every ordered similar pair
inside each group, and keeps one uniformly random hard negative per pair. When
too few triplets survive, the number of groups is halved so candidate pools
grow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import SimilarityPredicate


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class GroupPartition:
    """Disjoint balanced groups covering the train indices."""

    groups: list[np.ndarray]
    group_count: int


@dataclass
class MiningStats:
    """Bookkeeping for one mining pass.

    candidate_pairs counts ordered similar pairs examined;
    hard_triplets_found counts hard negatives over all pairs; selected counts
    emitted triplets (at most one per pair); outdated_at_use is filled in by
    the trainer when a mined triplet's hinge has died by the time its batch is
    trained.
    """

    candidate_pairs: int = 0
    hard_triplets_found: int = 0
    selected: int = 0
    outdated_at_use: int = 0


def partition_groups(train_indices, group_count: int, seed: int) -> GroupPartition:
    """Uniform random balanced partition; group sizes differ by at most one."""
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if not 1 <= group_count <= train_indices.size:
        raise ValueError(
            f"group_count={group_count} out of range for {train_indices.size} items"
        )
    rng = np.random.default_rng(seed)
    shuffled = train_indices[rng.permutation(train_indices.size)]
    groups = np.array_split(shuffled, group_count)
    return GroupPartition(groups, group_count)


def _squared_distances(z: np.ndarray) -> np.ndarray:
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def mine_group_hard(
    partition: GroupPartition,
    embeddings: np.ndarray,
    similarity: SimilarityPredicate,
    delta: float,
    seed: int,
) -> tuple[list[Triplet], MiningStats]:
    """One offline mining pass over all groups.

    For every ordered pair (a, p) with s(a,p)=1 inside a group, the hard set is
    the group's dissimilar items n with a strictly positive hinge for that
    pair; one member is drawn uniformly at random. Deterministic per seed
    (groups in order, anchors and positives ascending).

    Returns:
        (triplets, stats) with item indices taken from the partition.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    rng = np.random.default_rng(seed)
    stats = MiningStats()
    triplets: list[Triplet] = []
    for group in partition.groups:
        g = group.size
        if g < 2:
            continue
        z = embeddings[group]
        sim = similarity.pairwise(group, group)
        d2 = _squared_distances(z)
        eye = np.eye(g, dtype=bool)
        for a in range(g):
            pos = sim[a] & ~eye[a]
            if not pos.any():
                continue
            neg = ~sim[a]
            stats.candidate_pairs += int(pos.sum())
            if not neg.any():
                continue
            p_idx = np.flatnonzero(pos)
            n_idx = np.flatnonzero(neg)
            # hinge[p, n] = delta - d2[a, n] + d2[a, p]
            hard = (delta - d2[a, n_idx])[None, :] + d2[a, p_idx][:, None] > 0.0
            counts = hard.sum(axis=1)
            stats.hard_triplets_found += int(counts.sum())
            cols = np.nonzero(hard)[1]
            bounds = np.concatenate(([0], np.cumsum(counts)))
            for row in np.flatnonzero(counts):
                choices = cols[bounds[row] : bounds[row + 1]]
                n = n_idx[choices[rng.integers(choices.size)]]
                triplets.append(Triplet(int(group[a]), int(group[p_idx[row]]), int(group[n])))
                stats.selected += 1
    return triplets, stats


def mine_online_batch(
    batch_indices,
    embeddings: np.ndarray,
    similarity: SimilarityPredicate,
    delta: float,
) -> list[Triplet]:
    """In-batch mining: every hard negative of every ordered pair is emitted."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    batch = np.asarray(batch_indices, dtype=np.int64)
    g = batch.size
    if g < 2:
        return []
    z = embeddings[batch]
    sim = similarity.pairwise(batch, batch)
    d2 = _squared_distances(z)
    eye = np.eye(g, dtype=bool)
    triplets: list[Triplet] = []
    for a in range(g):
        pos = sim[a] & ~eye[a]
        neg = ~sim[a]
        if not pos.any() or not neg.any():
            continue
        hard = (delta - d2[a][None, :] + d2[a][:, None] > 0.0) & pos[:, None] & neg[None, :]
        for p, n in zip(*np.nonzero(hard)):
            triplets.append(Triplet(int(batch[a]), int(batch[p]), int(batch[n])))
    return triplets


def decay_groups(group_count: int, n_selected: int, min_triplets: int) -> int:
    """Halve the group count when mining starved; never drops below one."""
    if group_count < 1:
        raise ValueError("group_count must be >= 1")
    if n_selected < min_triplets and group_count > 1:
        return max(1, group_count // 2)
    return group_count
