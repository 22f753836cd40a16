"""Learned-quantization similarity search: a shallow encoder trained jointly
with shared additive codebooks under a triplet objective, compact per-item
codes via iterated conditional modes, and lookup-table asymmetric search."""

from .data import (
    DatasetSplit,
    LabeledDataset,
    SimilarityPredicate,
    load_features,
    load_labels,
    load_split,
    make_synthetic,
    save_features,
    save_labels,
    save_split,
    split,
)
from .encoder import (
    EncoderParams,
    forward,
    forward_cached,
    init_encoder,
    load_encoder,
    loss_grad_embeddings,
    save_encoder,
    triplet_loss,
    triplet_losses,
)
from .errors import DataError, EvaluationError, FormatError, TrainingError
from .evaluation import (
    EvalReport,
    RankedResult,
    aqd_score,
    build_table,
    evaluate,
    mean_average_precision,
    precision_at_n,
    precision_recall_curve,
    search,
)
from .mining import (
    GroupPartition,
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
    codebook_gradient,
    icm_encode,
    icm_encode_batch,
    init_product_quantization,
    load_codebooks,
    load_codes,
    quantization_loss,
    reconstruct,
    reconstruct_batch,
    save_codebooks,
    save_codes,
    update_codebooks,
    update_codebooks_blockwise,
)
from .training import (
    HyperParams,
    TrainLogRecord,
    TrainResult,
    build_params,
    encode_database,
    parse_config,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "CodebookSet",
    "DataError",
    "DatasetSplit",
    "EncoderParams",
    "EvalReport",
    "EvaluationError",
    "FormatError",
    "GroupPartition",
    "HyperParams",
    "LabeledDataset",
    "MiningStats",
    "QuantConfig",
    "RankedResult",
    "SimilarityPredicate",
    "TrainLogRecord",
    "TrainResult",
    "TrainingError",
    "Triplet",
    "aqd_score",
    "build_table",
    "codebook_gradient",
    "decay_groups",
    "encode_database",
    "evaluate",
    "forward",
    "forward_cached",
    "icm_encode",
    "icm_encode_batch",
    "init_encoder",
    "init_product_quantization",
    "load_codebooks",
    "load_codes",
    "load_encoder",
    "load_features",
    "load_labels",
    "load_split",
    "loss_grad_embeddings",
    "make_synthetic",
    "mean_average_precision",
    "mine_group_hard",
    "mine_online_batch",
    "parse_config",
    "partition_groups",
    "precision_at_n",
    "precision_recall_curve",
    "quantization_loss",
    "reconstruct",
    "reconstruct_batch",
    "save_codebooks",
    "save_codes",
    "save_encoder",
    "save_features",
    "save_labels",
    "save_split",
    "search",
    "split",
    "train",
    "triplet_loss",
    "triplet_losses",
    "update_codebooks",
    "update_codebooks_blockwise",
]
