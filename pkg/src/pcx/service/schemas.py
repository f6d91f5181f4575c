"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SynthRequest(BaseModel):
    out_dir: str
    families: int = 1
    classes_per_family: int = 2
    strategies_per_class: int = 1
    dim: int = 16
    separation: float = 8.0
    anisotropy: float = 1.0
    distractor_dims: int = 0
    train_count: int = 200
    holdout_count: int = 200
    ood_count: int = 0
    ood_kind: str = "far"
    ood_separation: float = 10.0
    seed: int = 0


class SynthResponse(BaseModel):
    manifest: str
    network: str
    ground_truth: str
    sample_count: int
    splits: dict[str, int]
    concept_layer: int
    config_hash: str


class ForwardRequest(BaseModel):
    net: str
    inputs: Optional[list[str]] = None
    dataset: Optional[str] = None
    split: Optional[str] = None


class ForwardResponse(BaseModel):
    inputs: list[str]
    logits: list[list[float]]
    argmax: list[int]


class AttributeRequest(BaseModel):
    net: str
    dataset: str
    method: str = "lrp-eps"
    layers: list[int]
    out_dir: str
    conditioning: str = "predicted"
    epsilon: float = 1e-9
    split: Optional[str] = None
    threads: int = 1
    drop_degenerate: bool = False
    seed: int = 0


class AttributeFile(BaseModel):
    layer: int
    matrix: str
    sidecar: str
    rows: int
    concepts: int
    dropped: list[int]


class AttributeResponse(BaseModel):
    files: list[AttributeFile]
    method: str
    split: Optional[str] = None


class FitRequest(BaseModel):
    attributions: str
    layer: int
    out_dir: str
    k: int = 8
    seed: int = 0
    reg: float = 1e-6
    weighted_assign: bool = True


class FitResponse(BaseModel):
    store: str
    classes_written: list[int]
    skipped: list[dict]
    partial: bool


class ValidateRequest(BaseModel):
    net: str
    store: str
    sample: Optional[str] = None
    dataset: Optional[str] = None
    sample_index: Optional[int] = None
    top_n: int = 5
    threshold_percentile: float = 5.0
    similar_band: float = 0.02
    against_class: Optional[int] = None
    out: Optional[str] = None


class EvalRequest(BaseModel):
    metric: str
    out_dir: str
    attributions: Optional[str] = None
    store: Optional[str] = None
    net: Optional[str] = None
    dataset: Optional[str] = None
    layers: Optional[list[int]] = None
    k: int = 5
    folds: int = 10
    seed: int = 0
    reg: float = 1e-6
    fraction_removed: float = 1.0
    repeats: int = 8
    eval_split: str = "holdout"
    max_samples: int = 64


class EvalResponse(BaseModel):
    report: str
    result: dict
    table: str


class TableRequest(BaseModel):
    report_dirs: list[str]


class TableResponse(BaseModel):
    table: str


class OodRequest(BaseModel):
    scorer: str
    net: str
    in_dataset: str
    out_dataset: str
    out_dir: str
    store: Optional[str] = None
    layer_index: Optional[int] = None
    temperature: float = 1.0
    in_split: Optional[str] = "holdout"
    out_split: Optional[str] = "ood"
    fit_split: str = "train"
    reg: float = 1e-6


class OodResponse(BaseModel):
    scorer: str
    auc: float
    orientation: str
    layer_index: Optional[int] = None
    temperature: Optional[float] = None
    counts: dict[str, int]
    in_label: str
    out_label: str
    in_scores_csv: str
    out_scores_csv: str
    report: str


class SimilarityRequest(BaseModel):
    store: str
    out_csv: str


class SimilarityResponse(BaseModel):
    classes: list[int]
    out_csv: str
    matrix: list[list[float]]


class RelmaxRequest(BaseModel):
    attributions: str
    layer: int
    concept: int
    count: int = Field(default=8, ge=1)


class RelmaxResponse(BaseModel):
    concept: int
    layer_index: int
    rows: list[int]
    sample_ids: list[int]
    values: list[float]


class OutlierClustersRequest(BaseModel):
    attributions: str
    store: str
    class_id: int
    percentile: float = 5.0
    k: int = 2
    seed: int = 0


class OutlierClustersResponse(BaseModel):
    class_id: int
    percentile: float
    threshold: Optional[float] = None
    clusters: list[dict]
    ungrouped: bool


class HealthResponse(BaseModel):
    status: str
    version: str
