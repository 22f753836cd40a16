"""Joint training of the encoder and the additive quantizer.

Each epoch: refresh train-set embeddings, (first epoch) initialize codebooks
and codes by per-subspace k-means, partition the train set into groups, mine
hard triplets, run minibatch SGD on the joint loss with codebooks and codes
frozen at their epoch-start values, refresh the codebooks from the mined
triplet roles and re-encode the train set, then halve the group count if
mining starved. Variants: two_step trains the encoder alone and fits the
quantizer once afterwards; pq_only keeps joint training but constrains the
codebooks to per-subspace blocks; online_mining mines hard negatives inside
item batches with fresh embeddings instead of offline groups.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .data import DatasetSplit, LabeledDataset, SimilarityPredicate
from .encoder import (
    EncoderParams,
    backward_and_step,
    forward,
    forward_cached,
    init_encoder,
    triplet_losses,
)
from .mining import (
    MiningStats,
    Triplet,
    decay_groups,
    mine_group_hard,
    mine_online_batch,
    partition_groups,
)
from .quantizer import (
    CodebookSet,
    QuantConfig,
    icm_encode_batch,
    init_product_quantization,
    pad_to_multiple,
    quantization_loss,
    reconstruct_batch,
    update_codebooks,
    update_codebooks_blockwise,
)

# rng stream tags so every random decision has its own derived seed
_RNG_ENCODER = 1
_RNG_PQ = 2
_RNG_PARTITION = 3
_RNG_MINE = 4
_RNG_SHUFFLE = 5


@dataclass
class HyperParams:
    """All training knobs; mirrors the flat key = value config file."""

    delta: float = 1.0
    lam: float = 0.1
    gamma: float = 0.1
    m: int = 4
    k: int = 256
    group_count: int = 10
    min_triplets: int = 1000
    batch_size: int = 128
    max_epochs: int = 30
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    embed_dim: int = 0  # 0: same as the input dim
    hidden_dim: int = 0  # 0: single affine layer
    activation: str = "relu"  # hidden-layer activation
    out_activation: str = "identity"  # final-layer activation
    kmeans_iters: int = 25
    icm_max_iters: int = 3
    codebook_lr: float = 1e-3
    codebook_gd_steps: int = 20
    n_query: int = 0
    n_train: int = 0  # 0: the whole database
    two_step: bool = False
    pq_only: bool = False
    online_mining: bool = False
    no_group_hard: bool = False
    per_batch_icm: bool = False
    penalty_exclude_diagonal: bool = False
    online_batch_items: int = 192
    final_quant_rounds: int = 10

    def __post_init__(self):
        if min(self.delta, self.lam, self.gamma, self.lr) < 0:
            raise ValueError("delta, lambda, gamma, lr must be non-negative")
        for name in ("m", "k", "group_count", "min_triplets", "batch_size",
                     "kmeans_iters", "icm_max_iters", "final_quant_rounds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_epochs < 0 or self.seed < 0:
            raise ValueError("max_epochs and seed must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.embed_dim < 0 or self.hidden_dim < 0:
            raise ValueError("dims must be non-negative")
        if self.codebook_lr <= 0:
            raise ValueError("codebook_lr must be positive")
        if self.codebook_gd_steps < 0:
            raise ValueError("codebook_gd_steps must be >= 0")
        if self.online_batch_items < 2:
            raise ValueError("online_batch_items must be >= 2")
        if self.n_query < 0 or self.n_train < 0:
            raise ValueError("split sizes must be non-negative")
        for act in (self.activation, self.out_activation):
            if act not in ("identity", "relu", "tanh"):
                raise ValueError(f"unknown activation {act!r}")


@dataclass
class TrainLogRecord:
    epoch: int
    mean_triplet_loss: float
    quantization_loss: float
    n_hard_triplets: int
    group_count: int
    wall_time: float
    candidate_pairs: int = 0
    hard_triplets_found: int = 0
    selected: int = 0
    outdated_at_use: int = 0


LOG_COLUMNS = [f.name for f in fields(TrainLogRecord)]


@dataclass
class TrainResult:
    encoder: EncoderParams
    codebooks: CodebookSet
    codes: np.ndarray  # train-set codes, rows aligned with split.train_indices
    log: list[TrainLogRecord] = field(default_factory=list)


def _rng(seed: int, tag: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, tag, epoch])


def _quant_dim(embed_dim: int, m: int) -> int:
    return embed_dim + (-embed_dim) % m


def _build_encoder(params: HyperParams, in_dim: int) -> EncoderParams:
    out = params.embed_dim or in_dim
    if params.hidden_dim:
        dims = [in_dim, params.hidden_dim, out]
        acts = [params.activation, params.out_activation]
    else:
        dims = [in_dim, out]
        acts = [params.out_activation]
    rng_seed = [params.seed, _RNG_ENCODER]
    return init_encoder(dims, acts, params.lr, params.momentum, seed=rng_seed)


def _quant_config(params: HyperParams) -> QuantConfig:
    return QuantConfig(
        gamma=0.0 if params.pq_only else params.gamma,
        lam=params.lam,
        icm_max_iters=params.icm_max_iters,
        codebook_lr=params.codebook_lr,
        codebook_gd_steps=params.codebook_gd_steps,
        penalty_exclude_diagonal=params.penalty_exclude_diagonal,
    )


def _check_supervision(sim: SimilarityPredicate, n: int) -> None:
    block = sim.pairwise(np.arange(n), np.arange(n))
    off = block & ~np.eye(n, dtype=bool)
    if not off.any():
        raise ValueError("train set has no similar pair")
    if block.all():
        raise ValueError("train set has no dissimilar pair")


class _EpochTrainer:
    """Shared minibatch machinery for the offline and online mining paths."""

    def __init__(self, params, x_train, encoder, qcfg):
        self.params = params
        self.x = x_train
        self.encoder = encoder
        self.qcfg = qcfg
        self.codebooks: CodebookSet | None = None
        self.codes: np.ndarray | None = None
        self.loss_sum = 0.0
        self.loss_count = 0
        self.outdated = 0

    def reset_epoch(self):
        self.loss_sum = 0.0
        self.loss_count = 0
        self.outdated = 0

    def role_codes(self, rows, z_role):
        """Codes used for a batch's quantization term: epoch-start by default,
        re-encoded from current embeddings when per_batch_icm is set."""
        base = self.codes[rows]
        if not self.params.per_batch_icm:
            return base
        zq = pad_to_multiple(z_role, self.codebooks.m)
        return icm_encode_batch(self.codebooks, zq, base, self.params.icm_max_iters)

    def train_batch(self, anchors, positives, negatives):
        p = self.params
        b = anchors.size
        rows = np.concatenate([anchors, positives, negatives])
        out, caches = forward_cached(self.encoder, self.x[rows])
        za, zp, zn = out[:b], out[b : 2 * b], out[2 * b :]
        hinges = triplet_losses(za, zp, zn, p.delta)
        self.outdated += int(np.count_nonzero(hinges <= 0.0))
        self.loss_sum += float(hinges.sum())
        self.loss_count += b

        active = (hinges > 0.0)[:, None]
        ga = np.where(active, 2.0 * (zn - zp), 0.0)
        gp = np.where(active, 2.0 * (zp - za), 0.0)
        gn = np.where(active, 2.0 * (za - zn), 0.0)
        use_quant = (not p.two_step) and p.lam > 0.0 and self.codebooks is not None
        if use_quant:
            d = za.shape[1]
            for g, z_role, role_rows in ((ga, za, anchors), (gp, zp, positives), (gn, zn, negatives)):
                codes = self.role_codes(role_rows, z_role)
                recon = reconstruct_batch(self.codebooks, codes)[:, :d]
                g += p.lam * 2.0 * (z_role - recon)
        upstream = np.concatenate([ga, gp, gn]) / b  # batch mean
        backward_and_step(self.encoder, caches, upstream)

    def update_quantizer(self, triplets: list[Triplet]):
        """Refresh codebooks from the epoch's triplet roles, then re-encode."""
        p = self.params
        z = pad_to_multiple(forward(self.encoder, self.x), self.codebooks.m)
        # anchors, then positives, then negatives; role multiplicity is intentional
        role_rows = np.array(
            [t.anchor for t in triplets]
            + [t.positive for t in triplets]
            + [t.negative for t in triplets],
            dtype=np.int64,
        )
        z_roles = z[role_rows]
        c_roles = self.codes[role_rows]
        if p.pq_only:
            self.codebooks = update_codebooks_blockwise(self.codebooks, z_roles, c_roles)
        else:
            self.codebooks = update_codebooks(self.codebooks, z_roles, c_roles, self.qcfg)
        self.codes = icm_encode_batch(self.codebooks, z, self.codes, p.icm_max_iters)
        return z

    def epoch_quant_loss(self, z_padded) -> float:
        if self.codebooks is None or self.codes is None:
            return 0.0
        return quantization_loss(
            z_padded, self.codebooks, self.codes, self.qcfg.gamma,
            self.qcfg.penalty_exclude_diagonal,
        )


def train(dataset: LabeledDataset, split: DatasetSplit, params: HyperParams) -> TrainResult:
    """Run the full training loop; deterministic for a fixed seed.

    With max_epochs=0 the freshly initialized encoder is returned together
    with all-zero codebooks and codes (quantizer initialization happens inside
    epoch 0, so no epoch means no quantizer).
    """
    train_idx = np.asarray(split.train_indices, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("split has an empty train set")
    p = params
    x_train = dataset.features[train_idx]
    sim = SimilarityPredicate([dataset.labels[i] for i in train_idx])
    n_t = train_idx.size
    _check_supervision(sim, n_t)

    encoder = _build_encoder(p, dataset.dim)
    quant_dim = _quant_dim(encoder.out_dim, p.m)
    if p.max_epochs == 0:
        return TrainResult(
            encoder,
            CodebookSet(np.zeros((p.m, quant_dim, p.k))),
            np.zeros((n_t, p.m), dtype=np.int64),
            [],
        )

    qcfg = _quant_config(p)
    state = _EpochTrainer(p, x_train, encoder, qcfg)
    group_count = 1 if p.no_group_hard else min(p.group_count, n_t)
    log: list[TrainLogRecord] = []

    for epoch in range(p.max_epochs):
        t0 = time.perf_counter()
        state.reset_epoch()
        z = forward(encoder, x_train)
        if epoch == 0 and not p.two_step:
            zq = pad_to_multiple(z, p.m)
            state.codebooks, state.codes = init_product_quantization(
                zq, p.m, p.k, p.kmeans_iters, seed=[p.seed, _RNG_PQ]
            )

        if p.online_mining:
            triplets, stats = _online_epoch(state, sim, epoch)
        else:
            partition = partition_groups(
                np.arange(n_t), group_count, seed=[p.seed, _RNG_PARTITION, epoch]
            )
            triplets, stats = mine_group_hard(
                partition, z, sim, p.delta, seed=[p.seed, _RNG_MINE, epoch]
            )
            if triplets:
                _run_batches(state, triplets, epoch)

        if triplets and not p.two_step:
            z_after = state.update_quantizer(triplets)
        else:
            z_after = pad_to_multiple(forward(encoder, x_train), p.m)
        stats.outdated_at_use = state.outdated

        mean_loss = state.loss_sum / state.loss_count if state.loss_count else 0.0
        log.append(TrainLogRecord(
            epoch=epoch,
            mean_triplet_loss=mean_loss,
            quantization_loss=state.epoch_quant_loss(z_after),
            n_hard_triplets=stats.selected,
            group_count=group_count,
            wall_time=time.perf_counter() - t0,
            candidate_pairs=stats.candidate_pairs,
            hard_triplets_found=stats.hard_triplets_found,
            selected=stats.selected,
            outdated_at_use=stats.outdated_at_use,
        ))
        if not np.isfinite(mean_loss):
            raise ValueError(f"non-finite mean triplet loss at epoch {epoch}")

        if stats.selected == 0 and (group_count == 1 or p.online_mining):
            warnings.warn(
                f"no hard triplets left at epoch {epoch}; stopping early (converged)"
            )
            break
        if not (p.online_mining or p.no_group_hard):
            group_count = decay_groups(group_count, stats.selected, p.min_triplets)

    if p.two_step:
        _fit_quantizer_post_hoc(state)

    if state.codebooks is None:
        state.codebooks = CodebookSet(np.zeros((p.m, quant_dim, p.k)))
        state.codes = np.zeros((n_t, p.m), dtype=np.int64)
    return TrainResult(encoder, state.codebooks, state.codes, log)


def _run_batches(state: _EpochTrainer, triplets: list[Triplet], epoch: int) -> None:
    p = state.params
    ta = np.array([t.anchor for t in triplets], dtype=np.int64)
    tp = np.array([t.positive for t in triplets], dtype=np.int64)
    tn = np.array([t.negative for t in triplets], dtype=np.int64)
    order = _rng(p.seed, _RNG_SHUFFLE, epoch).permutation(len(triplets))
    for start in range(0, len(triplets), p.batch_size):
        sel = order[start : start + p.batch_size]
        state.train_batch(ta[sel], tp[sel], tn[sel])


def _online_epoch(state: _EpochTrainer, sim, epoch: int):
    """Mine inside item batches with fresh embeddings, training as we go."""
    p = state.params
    n = state.x.shape[0]
    perm = _rng(p.seed, _RNG_PARTITION, epoch).permutation(n)
    all_triplets: list[Triplet] = []
    stats = MiningStats()
    for start in range(0, n, p.online_batch_items):
        items = perm[start : start + p.online_batch_items]
        z_batch = forward(state.encoder, state.x)
        batch_triplets = mine_online_batch(items, z_batch, sim, p.delta)
        sim_block = sim.pairwise(items, items)
        np.fill_diagonal(sim_block, False)
        stats.candidate_pairs += int(sim_block.sum())
        stats.hard_triplets_found += len(batch_triplets)
        stats.selected += len(batch_triplets)
        if not batch_triplets:
            continue
        all_triplets.extend(batch_triplets)
        ta = np.array([t.anchor for t in batch_triplets], dtype=np.int64)
        tp = np.array([t.positive for t in batch_triplets], dtype=np.int64)
        tn = np.array([t.negative for t in batch_triplets], dtype=np.int64)
        for bstart in range(0, len(batch_triplets), p.batch_size):
            sl = slice(bstart, bstart + p.batch_size)
            state.train_batch(ta[sl], tp[sl], tn[sl])
    return all_triplets, stats


def _fit_quantizer_post_hoc(state: _EpochTrainer) -> None:
    """two_step: quantize the final embeddings once, after encoder training."""
    p = state.params
    z = pad_to_multiple(forward(state.encoder, state.x), p.m)
    state.codebooks, state.codes = init_product_quantization(
        z, p.m, p.k, p.kmeans_iters, seed=[p.seed, _RNG_PQ]
    )
    for _ in range(p.final_quant_rounds):
        if p.pq_only:
            state.codebooks = update_codebooks_blockwise(state.codebooks, z, state.codes)
        else:
            state.codebooks = update_codebooks(state.codebooks, z, state.codes, state.qcfg)
        state.codes = icm_encode_batch(state.codebooks, z, state.codes, p.icm_max_iters)


def encode_database(
    encoder: EncoderParams,
    codebooks: CodebookSet,
    features: np.ndarray,
    init_codes: np.ndarray | None = None,
    icm_max_iters: int = 3,
) -> np.ndarray:
    """Forward features and ICM-encode every row against the codebooks."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        return np.zeros((0, codebooks.m), dtype=np.int64)
    z = forward(encoder, features)
    if z.shape[1] > codebooks.d:
        raise ValueError(
            f"embedding dim {z.shape[1]} exceeds codebook dim {codebooks.d}"
        )
    if z.shape[1] < codebooks.d:
        z = np.hstack([z, np.zeros((z.shape[0], codebooks.d - z.shape[1]))])
    return icm_encode_batch(codebooks, z, init_codes, icm_max_iters)


# --- configuration files ---------------------------------------------------

_ALIASES = {"lambda": "lam"}
_FIELD_TYPES = {f.name: type(f.default) for f in fields(HyperParams)}


def parse_config(text: str) -> dict:
    """Parse flat `key = value` lines (# comments) into typed overrides."""
    overrides: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        overrides[key] = _coerce(key, value, lineno)
    return overrides


def _coerce(key: str, value: str, lineno: int):
    target = _FIELD_TYPES[key]
    try:
        if target is bool:
            lowered = value.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if target is int:
            return int(value)
        if target is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ValueError(f"config line {lineno}: {exc}") from exc


def build_params(overrides: dict) -> HyperParams:
    return HyperParams(**overrides)


def write_train_log(path, records: list[TrainLogRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for rec in records:
            fh.write(",".join(repr(getattr(rec, col)) for col in LOG_COLUMNS) + "\n")
