"""HTTP service wrapping the core package.

One endpoint per CLI subcommand, operating on server-side paths. Validation
failures map to 400, missing files and directories to 404.
"""

from __future__ import annotations

import json
import os

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import data as datamod
from .cli import database_codes, load_data_dir, load_model_dir, _model_paths
from .data import SimilarityPredicate, save_split
from .encoder import forward, save_encoder
from .errors import DataError, EvaluationError, FormatError, TrainingError
from .evaluation import evaluate, save_report, search
from .quantizer import save_codebooks, save_codes
from .training import (
    HyperParams,
    build_params,
    encode_database,
    parse_config,
    train,
    write_train_log,
)

app = FastAPI(title="triquant", version="0.1.0")

_BAD_REQUEST = (FormatError, DataError, TrainingError, EvaluationError, ValueError)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from exc
    except _BAD_REQUEST as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


class SynthRequest(BaseModel):
    out_dir: str
    clusters: int
    per_cluster: int
    dim: int
    sigma: float = 0.5
    seed: int = 0
    format: str = Field(default="binary", pattern="^(binary|csv)$")


class SynthResponse(BaseModel):
    n_items: int
    out_dir: str


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    config_path: str | None = None
    split_path: str | None = None
    overrides: dict = Field(default_factory=dict)


class TrainResponse(BaseModel):
    model_dir: str
    epochs: int
    final_mean_triplet_loss: float | None
    final_quantization_loss: float | None


class EncodeRequest(BaseModel):
    model_dir: str
    data_dir: str
    out_path: str
    rows: str = Field(default="database", pattern="^(database|train|all)$")


class EncodeResponse(BaseModel):
    n_items: int
    out_path: str


class SearchRequest(BaseModel):
    model_dir: str
    data_dir: str
    query_index: int | None = None
    query_vector: list[float] | None = None
    top_r: int = 10
    codes_path: str | None = None


class SearchHit(BaseModel):
    db_row: int
    global_index: int
    item_id: str
    score: float


class SearchResponse(BaseModel):
    hits: list[SearchHit]


class EvalRequest(BaseModel):
    model_dir: str
    data_dir: str
    r: int = 100
    codes_path: str | None = None
    out_path: str | None = None


class EvalResponse(BaseModel):
    map_at_r: float
    r: int
    n_queries: int
    report_path: str


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/synth", response_model=SynthResponse)
def synth(req: SynthRequest) -> SynthResponse:
    def run():
        dataset = datamod.make_synthetic(
            req.clusters, req.per_cluster, req.dim, req.sigma, req.seed
        )
        os.makedirs(req.out_dir, exist_ok=True)
        name = "features.bin" if req.format == "binary" else "features.csv"
        datamod.save_features(
            os.path.join(req.out_dir, name), dataset.features, req.format
        )
        datamod.save_labels(os.path.join(req.out_dir, "labels.txt"), dataset.labels)
        return SynthResponse(n_items=len(dataset), out_dir=req.out_dir)

    return _guard(run)


@app.post("/train", response_model=TrainResponse)
def train_endpoint(req: TrainRequest) -> TrainResponse:
    def run():
        overrides: dict = {}
        if req.config_path:
            with open(req.config_path) as fh:
                overrides.update(parse_config(fh.read()))
        overrides.update(req.overrides)
        params = build_params(overrides)
        dataset = load_data_dir(req.data_dir)
        if req.split_path:
            split = datamod.load_split(req.split_path)
        else:
            n = len(dataset)
            n_query = params.n_query or max(1, n // 10)
            n_train = params.n_train or (n - n_query)
            split = datamod.split(dataset, n_query, n_train, params.seed)
        result = train(dataset, split, params)

        os.makedirs(req.out_dir, exist_ok=True)
        paths = _model_paths(req.out_dir)
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
        return TrainResponse(
            model_dir=req.out_dir,
            epochs=len(result.log),
            final_mean_triplet_loss=last.mean_triplet_loss if last else None,
            final_quantization_loss=last.quantization_loss if last else None,
        )

    return _guard(run)


@app.post("/encode", response_model=EncodeResponse)
def encode(req: EncodeRequest) -> EncodeResponse:
    def run():
        encoder, codebooks, split, meta = load_model_dir(req.model_dir)
        dataset = load_data_dir(req.data_dir)
        if req.rows == "all":
            rows = np.arange(len(dataset), dtype=np.int64)
        elif req.rows == "database":
            rows = split.database_indices
        else:
            rows = split.train_indices
        codes = encode_database(
            encoder,
            codebooks,
            dataset.features[rows],
            icm_max_iters=meta["params"]["icm_max_iters"],
        )
        save_codes(req.out_path, codes, meta["k"])
        return EncodeResponse(n_items=codes.shape[0], out_path=req.out_path)

    return _guard(run)


@app.post("/search", response_model=SearchResponse)
def search_endpoint(req: SearchRequest) -> SearchResponse:
    def run():
        encoder, codebooks, split, meta = load_model_dir(req.model_dir)
        dataset = load_data_dir(req.data_dir)
        if (req.query_index is None) == (req.query_vector is None):
            raise ValueError("provide exactly one of query_index or query_vector")
        if req.query_index is not None:
            if not 0 <= req.query_index < len(dataset):
                raise ValueError(f"query index {req.query_index} out of range")
            feat = dataset.features[req.query_index]
        else:
            feat = np.asarray(req.query_vector, dtype=np.float64)
            if feat.shape != (dataset.dim,):
                raise ValueError(
                    f"query vector must have {dataset.dim} entries, got {feat.size}"
                )
        codes = database_codes(
            req.codes_path, encoder, codebooks, split, meta, dataset
        )
        z = forward(encoder, feat[None, :])[0]
        if z.size < codebooks.d:
            z = np.concatenate([z, np.zeros(codebooks.d - z.size)])
        result = search(z, codebooks, codes, req.top_r)
        hits = []
        for pos, score in zip(result.indices, result.scores):
            global_idx = int(split.database_indices[pos])
            hits.append(
                SearchHit(
                    db_row=int(pos),
                    global_index=global_idx,
                    item_id=dataset.ids[global_idx],
                    score=float(score),
                )
            )
        return SearchResponse(hits=hits)

    return _guard(run)


@app.post("/eval", response_model=EvalResponse)
def eval_endpoint(req: EvalRequest) -> EvalResponse:
    def run():
        encoder, codebooks, split, meta = load_model_dir(req.model_dir)
        dataset = load_data_dir(req.data_dir)
        codes = database_codes(
            req.codes_path, encoder, codebooks, split, meta, dataset
        )
        zq = forward(encoder, dataset.features[split.query_indices])
        if zq.shape[1] < codebooks.d:
            zq = np.hstack([zq, np.zeros((zq.shape[0], codebooks.d - zq.shape[1]))])
        sim = SimilarityPredicate(dataset.labels)
        relevances = sim.pairwise(split.query_indices, split.database_indices)
        report = evaluate(zq, codebooks, codes, relevances, req.r)
        out = req.out_path or os.path.join(req.model_dir, "eval_report.json")
        save_report(out, report)
        return EvalResponse(
            map_at_r=report.map_at_r,
            r=report.r,
            n_queries=report.n_queries,
            report_path=out,
        )

    return _guard(run)
