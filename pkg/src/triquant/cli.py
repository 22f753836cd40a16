"""Command-line interface.

Subcommands: synth, train, encode, search, eval, serve. A data directory
holds features.bin (or features.csv) plus labels.txt; a model directory is
produced by `train` and holds encoder.bin, codebooks.bin, codes.bin (train
rows), split.json, trainlog.csv, and model.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as datamod
from .data import (
    DatasetSplit,
    LabeledDataset,
    SimilarityPredicate,
    load_split,
    make_synthetic,
    save_split,
)
from .encoder import forward, load_encoder, save_encoder
from .errors import DataError, EvaluationError, FormatError, TrainingError
from .evaluation import evaluate, save_report, search
from .quantizer import load_codebooks, load_codes, save_codebooks, save_codes
from .training import (
    HyperParams,
    build_params,
    encode_database,
    parse_config,
    train,
    write_train_log,
)

_CLI_ERRORS = (
    FormatError,
    DataError,
    TrainingError,
    EvaluationError,
    ValueError,
    OSError,
)


def load_data_dir(path: str) -> LabeledDataset:
    """Load a dataset directory written by `synth` (or hand-assembled)."""
    bin_path = os.path.join(path, "features.bin")
    csv_path = os.path.join(path, "features.csv")
    if os.path.exists(bin_path):
        features = datamod.load_features(bin_path, format="binary")
    elif os.path.exists(csv_path):
        features = datamod.load_features(csv_path, format="csv")
    else:
        raise FileNotFoundError(f"no features.bin or features.csv under {path}")
    labels = datamod.load_labels(os.path.join(path, "labels.txt"))
    ids = [f"item-{i:06d}" for i in range(features.shape[0])]
    return LabeledDataset(features, labels, ids)


def _model_paths(model_dir: str) -> dict:
    return {
        "encoder": os.path.join(model_dir, "encoder.bin"),
        "codebooks": os.path.join(model_dir, "codebooks.bin"),
        "codes": os.path.join(model_dir, "codes.bin"),
        "split": os.path.join(model_dir, "split.json"),
        "trainlog": os.path.join(model_dir, "trainlog.csv"),
        "meta": os.path.join(model_dir, "model.json"),
    }


def load_model_dir(model_dir: str):
    """Load (encoder, codebooks, split, meta) from a train output directory."""
    paths = _model_paths(model_dir)
    for key in ("encoder", "codebooks", "split", "meta"):
        if not os.path.exists(paths[key]):
            raise FileNotFoundError(f"missing {os.path.basename(paths[key])} in {model_dir}")
    encoder = load_encoder(paths["encoder"])
    codebooks = load_codebooks(paths["codebooks"])
    split = load_split(paths["split"])
    with open(paths["meta"]) as fh:
        meta = json.load(fh)
    return encoder, codebooks, split, meta


def _cmd_synth(args) -> int:
    dataset = make_synthetic(
        args.clusters, args.per_cluster, args.dim, args.sigma, args.seed
    )
    os.makedirs(args.out, exist_ok=True)
    name = "features.bin" if args.format == "binary" else "features.csv"
    datamod.save_features(os.path.join(args.out, name), dataset.features, args.format)
    datamod.save_labels(os.path.join(args.out, "labels.txt"), dataset.labels)
    print(
        f"wrote {len(dataset)} items ({args.clusters} clusters x "
        f"{args.per_cluster}, dim {args.dim}) to {args.out}"
    )
    return 0


_OVERRIDE_FLAGS = [
    # (flag, config key, type)
    ("--seed", "seed", int),
    ("--epochs", "max_epochs", int),
    ("--delta", "delta", float),
    ("--lambda", "lam", float),
    ("--gamma", "gamma", float),
    ("--m", "m", int),
    ("--k", "k", int),
    ("--lr", "lr", float),
    ("--group-count", "group_count", int),
    ("--min-triplets", "min_triplets", int),
    ("--batch-size", "batch_size", int),
    ("--embed-dim", "embed_dim", int),
    ("--hidden-dim", "hidden_dim", int),
    ("--n-query", "n_query", int),
    ("--n-train", "n_train", int),
]
_VARIANT_FLAGS = [
    ("--two-step", "two_step"),
    ("--pq-only", "pq_only"),
    ("--online-mining", "online_mining"),
    ("--no-group-hard", "no_group_hard"),
    ("--per-batch-icm", "per_batch_icm"),
    ("--penalty-exclude-diagonal", "penalty_exclude_diagonal"),
]


def _gather_params(args) -> HyperParams:
    overrides: dict = {}
    if args.config:
        with open(args.config) as fh:
            overrides.update(parse_config(fh.read()))
    for flag, key, _ in _OVERRIDE_FLAGS:
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is not None:
            overrides[key] = value
    for flag, key in _VARIANT_FLAGS:
        if getattr(args, key):
            overrides[key] = True
    return build_params(overrides)


def _make_split(dataset: LabeledDataset, params: HyperParams) -> DatasetSplit:
    n = len(dataset)
    n_query = params.n_query or max(1, n // 10)
    n_train = params.n_train or (n - n_query)
    return datamod.split(dataset, n_query, n_train, params.seed)


def _cmd_train(args) -> int:
    params = _gather_params(args)
    dataset = load_data_dir(args.data)
    if args.split:
        split = load_split(args.split)
    else:
        split = _make_split(dataset, params)

    result = train(dataset, split, params)

    os.makedirs(args.out, exist_ok=True)
    paths = _model_paths(args.out)
    save_encoder(paths["encoder"], result.encoder)
    save_codebooks(paths["codebooks"], result.codebooks)
    save_codes(paths["codes"], result.codes, params.k)
    save_split(paths["split"], split)
    write_train_log(paths["trainlog"], result.log)
    meta = {
        "in_dim": dataset.dim,
        "embed_dim": result.encoder.out_dim,
        "quant_dim": result.codebooks.d,
        "m": params.m,
        "k": params.k,
        "params": {f: getattr(params, f) for f in HyperParams.__dataclass_fields__},
    }
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    last = result.log[-1] if result.log else None
    if last is not None:
        print(
            f"trained {len(result.log)} epochs; final mean triplet loss "
            f"{last.mean_triplet_loss:.6f}, quantization loss "
            f"{last.quantization_loss:.6f}"
        )
    else:
        print("trained 0 epochs (max_epochs=0); wrote initialized model")
    print(f"model written to {args.out}")
    return 0


def _select_rows(split: DatasetSplit, n: int, which: str) -> np.ndarray:
    if which == "all":
        return np.arange(n, dtype=np.int64)
    if which == "database":
        return split.database_indices
    if which == "train":
        return split.train_indices
    raise ValueError(f"unknown row selection {which!r}")


def _cmd_encode(args) -> int:
    encoder, codebooks, split, meta = load_model_dir(args.model)
    dataset = load_data_dir(args.data)
    rows = _select_rows(split, len(dataset), args.rows)
    codes = encode_database(
        encoder,
        codebooks,
        dataset.features[rows],
        icm_max_iters=meta["params"]["icm_max_iters"],
    )
    save_codes(args.out, codes, meta["k"])
    print(f"encoded {codes.shape[0]} items ({args.rows} rows) to {args.out}")
    return 0


def database_codes(codes_path, encoder, codebooks, split, meta, dataset) -> np.ndarray:
    """Database codes: loaded from codes_path when given, else computed."""
    if codes_path:
        codes, k = load_codes(codes_path)
        if codes.shape[0] != split.database_indices.size:
            raise DataError(
                f"codes file has {codes.shape[0]} rows, database has "
                f"{split.database_indices.size}"
            )
        if k != meta["k"]:
            raise DataError(f"codes file k={k} does not match model k={meta['k']}")
        return codes
    return encode_database(
        encoder,
        codebooks,
        dataset.features[split.database_indices],
        icm_max_iters=meta["params"]["icm_max_iters"],
    )


def _cmd_search(args) -> int:
    encoder, codebooks, split, meta = load_model_dir(args.model)
    dataset = load_data_dir(args.data)
    if not 0 <= args.query_index < len(dataset):
        raise ValueError(f"query index {args.query_index} out of range")
    codes = database_codes(args.codes, encoder, codebooks, split, meta, dataset)
    z = forward(encoder, dataset.features[args.query_index : args.query_index + 1])[0]
    if z.size < codebooks.d:
        z = np.concatenate([z, np.zeros(codebooks.d - z.size)])
    result = search(z, codebooks, codes, args.top_r)
    print("rank\tdb_row\titem\tscore")
    for rank, (pos, score) in enumerate(zip(result.indices, result.scores), 1):
        global_idx = int(split.database_indices[pos])
        print(f"{rank}\t{pos}\t{dataset.ids[global_idx]}\t{score:.6f}")
    return 0


def _cmd_eval(args) -> int:
    encoder, codebooks, split, meta = load_model_dir(args.model)
    dataset = load_data_dir(args.data)
    codes = database_codes(args.codes, encoder, codebooks, split, meta, dataset)
    zq = forward(encoder, dataset.features[split.query_indices])
    if zq.shape[1] < codebooks.d:
        zq = np.hstack([zq, np.zeros((zq.shape[0], codebooks.d - zq.shape[1]))])
    sim = SimilarityPredicate(dataset.labels)
    relevances = sim.pairwise(split.query_indices, split.database_indices)
    report = evaluate(zq, codebooks, codes, relevances, args.r)
    out = args.out or os.path.join(args.model, "eval_report.json")
    save_report(out, report)
    print(f"MAP@{args.r} = {report.map_at_r:.6f} over {report.n_queries} queries")
    print(f"report written to {out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triquant",
        description="learned-quantization similarity search toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate clustered synthetic data")
    p_synth.add_argument("--clusters", type=int, required=True)
    p_synth.add_argument("--per-cluster", type=int, required=True)
    p_synth.add_argument("--dim", type=int, required=True)
    p_synth.add_argument("--sigma", type=float, default=0.5)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--format", choices=("binary", "csv"), default="binary")
    p_synth.set_defaults(func=_cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a data directory")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--split", default=None, help="use an existing split.json")
    for flag, _, ftype in _OVERRIDE_FLAGS:
        p_train.add_argument(flag, type=ftype, default=None)
    for flag, _ in _VARIANT_FLAGS:
        p_train.add_argument(flag, action="store_true")
    p_train.set_defaults(func=_cmd_train)

    p_encode = sub.add_parser("encode", help="encode dataset rows with a model")
    p_encode.add_argument("--model", required=True)
    p_encode.add_argument("--data", required=True)
    p_encode.add_argument("--out", required=True)
    p_encode.add_argument(
        "--rows", choices=("database", "train", "all"), default="database"
    )
    p_encode.set_defaults(func=_cmd_encode)

    p_search = sub.add_parser("search", help="rank the database for one query")
    p_search.add_argument("--model", required=True)
    p_search.add_argument("--data", required=True)
    p_search.add_argument("--query-index", type=int, required=True)
    p_search.add_argument("--top-r", type=int, default=10)
    p_search.add_argument("--codes", default=None, help="precomputed database codes")
    p_search.set_defaults(func=_cmd_search)

    p_eval = sub.add_parser("eval", help="retrieval metrics over the query split")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--r", type=int, default=100)
    p_eval.add_argument("--codes", default=None, help="precomputed database codes")
    p_eval.add_argument("--out", default=None, help="report path (default: model dir)")
    p_eval.set_defaults(func=_cmd_eval)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=_cmd_serve)

    return parser


def run_cli(argv: list[str] | None = None) -> int:
    """Parse argv and run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
