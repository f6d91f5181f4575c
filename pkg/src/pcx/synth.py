"""Synthetic dataset generator with a class-aligned linear toy network.

Each class owns a block of "strategy" dimensions; every sub-strategy places
its Gaussian mean on one of them, so sub-strategies are separated by a
configurable multiple of the within-strategy sigma. Optional extras:

* distractor dims: activate for every sample (positive mean) but carry zero
  weight in the class head, so they show up in activations yet receive no
  relevance;
* shadow dims (``ood_kind="shadow"``): carry class-head weight but are never
  populated by in-distribution samples. The OOD split activates them instead
  of the real strategy dim, producing matched logits with different concept
  use;
* ``ood_kind="far"``: the OOD split activates *all* of its class's strategy
  dims at ``ood_separation/sqrt(2)`` instead of a single one. Concept use is
  scale-free after normalization, so a useful outlier must shift the balance
  of concepts rather than their magnitude; this needs at least two strategy
  dims per class.
* ``ood_kind="heldout-class"``: the last class contributes no train/holdout
  samples; its draws all land in the OOD split. The head still covers it,
  so its predictions are well-formed but no prototypes will ever see it.

The toy network is dense(identity) -> relu -> dense(class head), so its
logits follow the class of the sample and the post-ReLU activation (layer
index 1) is the natural concept layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import LayerSpec, NetworkSpec
from .errors import InputError

CONCEPT_LAYER = 1  # post-ReLU activation of the toy network


@dataclass(frozen=True)
class SynthConfig:
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

    def __post_init__(self):
        for name in ("families", "classes_per_family", "strategies_per_class", "dim"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1", **{name: getattr(self, name)})
        for name in ("train_count", "holdout_count"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1", **{name: getattr(self, name)})
        if self.separation < 0:
            raise InputError("separation must be >= 0", separation=self.separation)
        if self.anisotropy <= 0:
            raise InputError("anisotropy must be > 0", anisotropy=self.anisotropy)
        if self.ood_kind not in ("far", "shadow", "heldout-class"):
            raise InputError(
                "ood_kind must be 'far', 'shadow' or 'heldout-class'",
                ood_kind=self.ood_kind,
            )
        if self.distractor_dims < 0 or self.ood_count < 0:
            raise InputError("counts must be >= 0")

    @property
    def class_count(self) -> int:
        return self.families * self.classes_per_family

    @property
    def strategy_count(self) -> int:
        return self.class_count * self.strategies_per_class

    def required_dims(self) -> int:
        shadow = self.class_count if self.ood_kind == "shadow" and self.ood_count else 0
        return self.strategy_count + shadow + self.distractor_dims

    def to_dict(self) -> dict:
        return {
            "families": self.families,
            "classes_per_family": self.classes_per_family,
            "strategies_per_class": self.strategies_per_class,
            "dim": self.dim,
            "separation": self.separation,
            "anisotropy": self.anisotropy,
            "distractor_dims": self.distractor_dims,
            "train_count": self.train_count,
            "holdout_count": self.holdout_count,
            "ood_count": self.ood_count,
            "ood_kind": self.ood_kind,
            "ood_separation": self.ood_separation,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(doc: dict) -> "SynthConfig":
        return SynthConfig(**doc)


@dataclass(frozen=True)
class SynthSample:
    values: np.ndarray
    label: int
    split: str  # train | holdout | ood
    strategy: int  # global strategy index, -1 for ood


@dataclass(frozen=True)
class SynthDataset:
    config: SynthConfig
    samples: tuple[SynthSample, ...]
    network: NetworkSpec
    ground_truth: dict = field(default_factory=dict)


def _dim_layout(cfg: SynthConfig) -> dict:
    shadow = cfg.class_count if cfg.ood_kind == "shadow" and cfg.ood_count else 0
    return {
        "strategy_dims": list(range(cfg.strategy_count)),
        "shadow_dims": list(range(cfg.strategy_count, cfg.strategy_count + shadow)),
        "distractor_dims": list(range(cfg.dim - cfg.distractor_dims, cfg.dim)),
        "noise_dims": list(
            range(cfg.strategy_count + shadow, cfg.dim - cfg.distractor_dims)
        ),
    }


def generate(cfg: SynthConfig) -> SynthDataset:
    """Draw all splits and build the matching toy network, deterministically."""
    if cfg.dim < cfg.required_dims():
        raise InputError(
            "dim too small for the requested layout",
            dim=cfg.dim,
            required=cfg.required_dims(),
        )
    if cfg.ood_count and cfg.ood_kind == "far" and cfg.strategies_per_class < 2:
        raise InputError(
            "far OOD shifts the balance between a class's strategy dims and "
            "needs strategies_per_class >= 2; use ood_kind='shadow' otherwise",
            strategies_per_class=cfg.strategies_per_class,
        )
    heldout_class = (
        cfg.class_count - 1
        if cfg.ood_kind == "heldout-class" and cfg.ood_count
        else None
    )
    if heldout_class == 0:
        raise InputError("heldout-class OOD needs at least two classes")
    layout = _dim_layout(cfg)
    rng = np.random.default_rng(cfg.seed)
    height = cfg.separation / np.sqrt(2.0)
    m = cfg.dim
    n_classes = cfg.class_count
    spc = cfg.strategies_per_class

    sigma = np.ones(m)
    for d in layout["noise_dims"]:
        sigma[d] = np.sqrt(cfg.anisotropy)
    for d in layout["distractor_dims"]:
        sigma[d] = np.sqrt(cfg.anisotropy)

    strategy_means = np.zeros((cfg.strategy_count, m))
    for s in range(cfg.strategy_count):
        strategy_means[s, s] = height
        for d in layout["distractor_dims"]:
            strategy_means[s, d] = height

    head = np.zeros((n_classes, m), dtype=np.float32)
    for k in range(n_classes):
        for s in range(spc):
            head[k, k * spc + s] = 1.0
        if layout["shadow_dims"]:
            head[k, layout["shadow_dims"][k]] = 1.0

    samples: list[SynthSample] = []
    for k in range(n_classes):
        if k == heldout_class:
            for s in range(spc):
                mean = strategy_means[k * spc + s]
                draws = mean + rng.standard_normal((cfg.ood_count, m)) * sigma
                for row in draws:
                    samples.append(SynthSample(row.astype(np.float32), k, "ood", -1))
            continue
        for s in range(spc):
            strategy = k * spc + s
            mean = strategy_means[strategy]
            for split, count in (("train", cfg.train_count), ("holdout", cfg.holdout_count)):
                draws = mean + rng.standard_normal((count, m)) * sigma
                for row in draws:
                    samples.append(SynthSample(row.astype(np.float32), k, split, strategy))
        if cfg.ood_count and heldout_class is None:
            ood_mean = _ood_mean(cfg, layout, strategy_means, k, height)
            draws = ood_mean + rng.standard_normal((cfg.ood_count, m)) * sigma
            for row in draws:
                samples.append(SynthSample(row.astype(np.float32), k, "ood", -1))

    layers = (
        LayerSpec(kind="dense", weights=np.eye(m, dtype=np.float32)),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", weights=head),
    )
    net = NetworkSpec(layers=layers, input_shape=(m,), class_count=n_classes)
    ground_truth = {
        "config": cfg.to_dict(),
        "dim_layout": layout,
        "height": float(height),
        "sigma": [float(v) for v in sigma],
        "strategy_means": [[float(v) for v in row] for row in strategy_means],
        "head": [[float(v) for v in row] for row in head],
        "strategy_to_class": {str(s): s // spc for s in range(cfg.strategy_count)},
        "concept_layer": CONCEPT_LAYER,
        "heldout_class": heldout_class,
    }
    return SynthDataset(cfg, tuple(samples), net, ground_truth)


def _ood_mean(
    cfg: SynthConfig,
    layout: dict,
    strategy_means: np.ndarray,
    class_id: int,
    height: float,
) -> np.ndarray:
    base = strategy_means[class_id * cfg.strategies_per_class].copy()
    if cfg.ood_kind == "shadow":
        base[class_id * cfg.strategies_per_class] = 0.0
        base[layout["shadow_dims"][class_id]] = height
        return base
    # unusual concept combination: every strategy dim of the class active
    level = cfg.ood_separation / np.sqrt(2.0)
    first = class_id * cfg.strategies_per_class
    for s in range(cfg.strategies_per_class):
        base[first + s] = level
    return base


def points_by_strategy(
    dataset: SynthDataset, split: str
) -> dict[int, np.ndarray]:
    """Raw sample vectors of one split, grouped by global strategy index."""
    groups: dict[int, list[np.ndarray]] = {}
    for sample in dataset.samples:
        if sample.split == split and sample.strategy >= 0:
            groups.setdefault(sample.strategy, []).append(sample.values)
    return {s: np.array(v) for s, v in sorted(groups.items())}
