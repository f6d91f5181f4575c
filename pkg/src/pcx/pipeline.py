"""File-level pipeline operations behind the service endpoints and CLI.

Every operation reads/writes the on-disk formats (PCXT tensors, JSON
manifests, attribution sidecars, prototype stores, report files) and returns
a JSON-serializable summary. All writes are atomic and byte-deterministic
for a fixed seed/config, so repeated runs produce identical artifacts.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attribution, metrics, ood, synth
from .engine import NetworkSpec, forward, load_network, save_network
from .errors import InputError, NumericalError
from .prototypes import (
    PrototypeComponent,
    PrototypeModel,
    assign_prototype,
    euclidean,
    explain_delta,
    class_similarity_matrix,
    fit_gmm,
    log_likelihood_class,
    outlier_clusters,
)
from .tensorio import dump_json, read_json, read_tensor, write_json, write_tensor

EVAL_METRICS = (
    "faithfulness",
    "stability",
    "sparseness",
    "coverage",
    "outlier",
    "clustering-compare",
)


def config_hash(config: dict) -> str:
    return hashlib.sha256(dump_json(config).encode()).hexdigest()[:12]


# --- dataset manifests -------------------------------------------------------


@dataclass(frozen=True)
class SampleEntry:
    path: str
    label: int
    split: str
    strategy: int = -1


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    input_shape: tuple[int, ...]
    class_count: int
    samples: tuple[SampleEntry, ...]

    def select(self, split: str | None = None) -> list[tuple[int, SampleEntry]]:
        return [
            (i, s)
            for i, s in enumerate(self.samples)
            if split is None or s.split == split
        ]

    def tensor(self, entry: SampleEntry) -> np.ndarray:
        return read_tensor(self.root / entry.path)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    doc = read_json(path)
    for key in ("input_shape", "class_count", "samples"):
        if key not in doc:
            raise InputError(f"manifest missing '{key}'", path=str(path))
    samples = []
    for i, entry in enumerate(doc["samples"]):
        label = int(entry["label"])
        if not 0 <= label < doc["class_count"]:
            raise InputError(
                "label outside class range", path=str(path), sample=i, label=label
            )
        rel = entry["path"]
        if not (path.parent / rel).exists():
            raise InputError("referenced tensor missing", path=str(path), sample=i, file=rel)
        samples.append(
            SampleEntry(rel, label, entry.get("split", "train"), int(entry.get("strategy", -1)))
        )
    return DatasetManifest(
        root=path.parent,
        input_shape=tuple(doc["input_shape"]),
        class_count=int(doc["class_count"]),
        samples=tuple(samples),
    )


def save_manifest(manifest_doc: dict, path: Path) -> None:
    write_json(path, manifest_doc)


# --- synth -------------------------------------------------------------------


def op_synth(config: dict, out_dir: str | Path) -> dict:
    cfg = synth.SynthConfig.from_dict(config)
    dataset = synth.generate(cfg)
    out = Path(out_dir)
    net_path = out / "network" / "net.json"
    save_network(dataset.network, net_path)
    entries = []
    for i, sample in enumerate(dataset.samples):
        rel = f"tensors/{i:05d}.pcxt"
        write_tensor(out / rel, sample.values)
        entries.append(
            {
                "path": rel,
                "label": sample.label,
                "split": sample.split,
                "strategy": sample.strategy,
            }
        )
    manifest_doc = {
        "input_shape": [int(d) for d in dataset.network.input_shape],
        "class_count": dataset.network.class_count,
        "samples": entries,
    }
    save_manifest(manifest_doc, out / "manifest.json")
    write_json(out / "ground_truth.json", dataset.ground_truth)
    splits = {}
    for sample in dataset.samples:
        splits[sample.split] = splits.get(sample.split, 0) + 1
    return {
        "manifest": str(out / "manifest.json"),
        "network": str(net_path),
        "ground_truth": str(out / "ground_truth.json"),
        "sample_count": len(dataset.samples),
        "splits": splits,
        "concept_layer": synth.CONCEPT_LAYER,
        "config_hash": config_hash(cfg.to_dict()),
    }


# --- forward -----------------------------------------------------------------


def op_forward(
    net_path: str | Path,
    inputs: list[str] | None = None,
    dataset: str | Path | None = None,
    split: str | None = None,
) -> dict:
    net = load_network(net_path)
    tensors: list[np.ndarray] = []
    names: list[str] = []
    if inputs:
        for p in inputs:
            tensors.append(read_tensor(p))
            names.append(str(p))
    elif dataset:
        manifest = load_manifest(dataset)
        for i, entry in manifest.select(split):
            tensors.append(manifest.tensor(entry))
            names.append(entry.path)
    else:
        raise InputError("forward needs input tensor paths or a dataset manifest")
    logits = []
    for t in tensors:
        logits.append([float(v) for v in forward(net, t).logits])
    return {
        "inputs": names,
        "logits": logits,
        "argmax": [int(np.argmax(l)) for l in logits],
    }


# --- attribute ---------------------------------------------------------------


def concept_fn_for(method: str, epsilon: float):
    """Normalized concept extractor for a method id (the store's convention)."""
    return ood.default_concept_fn(epsilon=epsilon, method=method)


def _raw_concept_vector(net, x, class_index, layer_index, method, epsilon):
    if method == "lrp-eps":
        return attribution.lrp_epsilon(net, x, class_index, layer_index, epsilon)
    if method == "lrp-composite":
        return attribution.lrp_composite(net, x, class_index, layer_index, epsilon)
    if method == "input-x-gradient":
        return attribution.input_x_gradient(net, x, class_index, layer_index)
    if method == "guided-backprop":
        return attribution.guided_backprop(net, x, class_index, layer_index)
    if method in ("activation-sum", "activation-max"):
        trace = forward(net, x)
        return attribution.activation_pool(
            trace, layer_index, "max" if method == "activation-max" else "sum"
        )
    raise InputError("unknown attribution method", method=method, valid=list(attribution.METHODS))


def op_attribute(
    net_path: str | Path,
    dataset_path: str | Path,
    method: str,
    layers: list[int],
    out_dir: str | Path,
    conditioning: str = "predicted",
    epsilon: float = attribution.DEFAULT_EPSILON,
    split: str | None = None,
    threads: int = 1,
    drop_degenerate: bool = False,
    seed: int = 0,
) -> dict:
    if method not in attribution.METHODS:
        raise InputError(
            "unknown attribution method", method=method, valid=list(attribution.METHODS)
        )
    net = load_network(net_path)
    manifest = load_manifest(dataset_path)
    selected = manifest.select(split)
    if not selected:
        raise InputError("no samples selected", dataset=str(dataset_path), split=split)
    out = Path(out_dir)
    files = []
    for layer in layers:
        net.check_layer_index(layer)

        def compute(item):
            idx, entry = item
            x = manifest.tensor(entry)
            if conditioning == "predicted":
                cls = int(np.argmax(forward(net, x).logits))
            elif conditioning == "label":
                cls = entry.label
            else:
                cls = int(conditioning)
                if not 0 <= cls < net.class_count:
                    raise InputError("conditioning class out of range", class_index=cls)
            vec = _raw_concept_vector(net, x, cls, layer, method, epsilon)
            try:
                vec = attribution.normalize(vec)
            except NumericalError:
                if drop_degenerate:
                    return idx, cls, None
                raise NumericalError(
                    "degenerate (all-zero) concept vector",
                    sample=idx,
                    path=entry.path,
                    layer_index=layer,
                )
            return idx, cls, vec.values

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(compute, selected))
        else:
            results = [compute(item) for item in selected]

        kept = [(i, c, v) for i, c, v in results if v is not None]
        dropped = [i for i, c, v in results if v is None]
        if not kept:
            raise NumericalError("all samples degenerate at this layer", layer_index=layer)
        matrix = np.array([v for _, _, v in kept], dtype=np.float32)
        matrix_rel = f"attr_layer{layer:03d}.pcxt"
        sidecar_rel = f"attr_layer{layer:03d}.json"
        write_tensor(out / matrix_rel, matrix)
        sidecar = {
            "method": method,
            "layer_index": layer,
            "epsilon": epsilon if method.startswith("lrp") else None,
            "normalized": True,
            "class_conditioning": conditioning,
            "flavor": "activation" if method.startswith("activation") else "relevance",
            # relative to the sidecar so workspaces stay relocatable and
            # identical runs in different roots emit identical bytes
            "dataset": os.path.relpath(Path(dataset_path).resolve(), out.resolve()),
            "split": split,
            "matrix": matrix_rel,
            "sample_ids": [i for i, _, _ in kept],
            "conditioned_class": [c for _, c, _ in kept],
            "labels": [manifest.samples[i].label for i, _, _ in kept],
            "strategies": [manifest.samples[i].strategy for i, _, _ in kept],
            "dropped_samples": dropped,
            "concept_count": int(matrix.shape[1]),
            "seed": seed,
        }
        write_json(out / sidecar_rel, sidecar)
        files.append(
            {
                "layer": layer,
                "matrix": str(out / matrix_rel),
                "sidecar": str(out / sidecar_rel),
                "rows": int(matrix.shape[0]),
                "concepts": int(matrix.shape[1]),
                "dropped": dropped,
            }
        )
    return {"files": files, "method": method, "split": split}


def load_attribution(attr_dir: str | Path, layer: int) -> tuple[np.ndarray, dict]:
    attr_dir = Path(attr_dir)
    sidecar_path = attr_dir / f"attr_layer{layer:03d}.json"
    if not sidecar_path.exists():
        available = sorted(p.name for p in attr_dir.glob("attr_layer*.json"))
        raise InputError(
            "no attribution sidecar for layer",
            layer_index=layer,
            dir=str(attr_dir),
            available=available,
        )
    sidecar = read_json(sidecar_path)
    matrix = read_tensor(attr_dir / sidecar["matrix"])
    if not os.path.isabs(sidecar["dataset"]):
        sidecar["dataset"] = str((attr_dir / sidecar["dataset"]).resolve())
    return matrix, sidecar


def attribution_layers(attr_dir: str | Path) -> list[int]:
    attr_dir = Path(attr_dir)
    layers = []
    for p in sorted(attr_dir.glob("attr_layer*.json")):
        layers.append(int(p.stem.replace("attr_layer", "")))
    if not layers:
        raise InputError("no attribution files found", dir=str(attr_dir))
    return layers


# --- fit ---------------------------------------------------------------------


def op_fit(
    attr_dir: str | Path,
    layer: int,
    k: int,
    seed: int,
    out_dir: str | Path,
    reg: float = 1e-6,
    weighted_assign: bool = True,
) -> dict:
    matrix, sidecar = load_attribution(attr_dir, layer)
    labels = np.asarray(sidecar["labels"], dtype=np.int64)
    out = Path(out_dir)
    classes = sorted(int(c) for c in np.unique(labels))
    written, skipped = [], []
    for cls in classes:
        rows = np.flatnonzero(labels == cls)
        if rows.size < k:
            skipped.append({"class": cls, "reason": f"{rows.size} samples < k={k}"})
            continue
        pts = matrix[rows].astype(np.float64)
        model = fit_gmm(
            pts, k, seed, reg=reg, class_id=cls, layer_index=layer,
            method=sidecar["method"],
        )
        train_ll = sorted(float(log_likelihood_class(model, p)) for p in pts)
        doc = {
            "class_id": cls,
            "layer_index": layer,
            "method": sidecar["method"],
            "components": [
                {
                    "weight": c.weight,
                    "mean": [float(v) for v in c.mean],
                    "covariance": [[float(v) for v in row] for row in c.covariance],
                }
                for c in model.components
            ],
            "closest_training_index": [
                int(sidecar["sample_ids"][rows[j]]) for j in model.closest_training_index
            ],
            "training_log_likelihoods": train_ll,
            "training_sample_ids": [int(sidecar["sample_ids"][r]) for r in rows],
            "metadata": {
                key: model.metadata[key]
                for key in ("seed", "reg", "k", "warnings", "covariance_type",
                            "iterations", "converged")
            },
        }
        write_json(out / f"class_{cls:03d}.json", doc)
        written.append(cls)
    if not written:
        raise InputError("no class had enough samples", k=k, classes=classes)
    index = {
        "layer_index": layer,
        "method": sidecar["method"],
        "epsilon": sidecar.get("epsilon"),
        "normalized": True,
        "k": k,
        "seed": seed,
        "reg": reg,
        "weighted_assign": weighted_assign,
        "classes": written,
        "skipped": skipped,
        "partial": bool(skipped),
        "attribution_dir": os.path.relpath(Path(attr_dir).resolve(), Path(out).resolve()),
    }
    write_json(out / "store.json", index)
    return {
        "store": str(out / "store.json"),
        "classes_written": written,
        "skipped": skipped,
        "partial": bool(skipped),
    }


@dataclass(frozen=True)
class PrototypeStore:
    root: Path
    index: dict
    models: dict[int, PrototypeModel]
    training_ll: dict[int, list[float]]
    training_ids: dict[int, list[int]]

    @property
    def layer_index(self) -> int:
        return int(self.index["layer_index"])

    @property
    def method(self) -> str:
        return self.index["method"]

    @property
    def epsilon(self) -> float:
        eps = self.index.get("epsilon")
        return attribution.DEFAULT_EPSILON if eps is None else float(eps)

    @property
    def weighted(self) -> bool:
        return bool(self.index.get("weighted_assign", True))

    def concept_fn(self):
        return concept_fn_for(self.method, self.epsilon)


def load_store(store_dir: str | Path) -> PrototypeStore:
    root = Path(store_dir)
    index_path = root if root.name == "store.json" else root / "store.json"
    root = index_path.parent
    index = read_json(index_path)
    models = {}
    training_ll = {}
    training_ids = {}
    for cls in index["classes"]:
        doc = read_json(root / f"class_{cls:03d}.json")
        components = tuple(
            PrototypeComponent.create(
                comp["weight"], np.array(comp["mean"]), np.array(comp["covariance"])
            )
            for comp in doc["components"]
        )
        models[cls] = PrototypeModel(
            class_id=cls,
            layer_index=doc["layer_index"],
            method=doc["method"],
            components=components,
            closest_training_index=tuple(doc["closest_training_index"]),
            metadata=doc.get("metadata", {}),
        )
        training_ll[cls] = [float(v) for v in doc["training_log_likelihoods"]]
        training_ids[cls] = [int(v) for v in doc.get("training_sample_ids", [])]
    return PrototypeStore(root, index, models, training_ll, training_ids)


# --- validate ----------------------------------------------------------------


def percentile_of(sorted_scores: list[float], value: float) -> float:
    if not sorted_scores:
        raise NumericalError("no training scores recorded")
    below = np.searchsorted(np.asarray(sorted_scores), value, side="right")
    return 100.0 * float(below) / len(sorted_scores)


def op_validate(
    net_path: str | Path,
    store_dir: str | Path,
    sample_path: str | Path | None = None,
    dataset_path: str | Path | None = None,
    sample_index: int | None = None,
    top_n: int = 5,
    threshold_percentile: float = 5.0,
    similar_band: float = 0.02,
    against_class: int | None = None,
    out_path: str | Path | None = None,
) -> dict:
    net = load_network(net_path)
    store = load_store(store_dir)
    if sample_path is not None:
        x = read_tensor(sample_path)
        sample_id = str(sample_path)
    elif dataset_path is not None and sample_index is not None:
        manifest = load_manifest(dataset_path)
        if not 0 <= sample_index < len(manifest.samples):
            raise InputError("sample index out of range", sample_index=sample_index)
        x = manifest.tensor(manifest.samples[sample_index])
        sample_id = f"{dataset_path}#{sample_index}"
    else:
        raise InputError("validate needs a sample path or dataset+index")
    if x.shape != net.input_shape:
        raise InputError(
            "sample shape mismatch", got=list(x.shape), expected=list(net.input_shape)
        )
    trace = forward(net, x)
    predicted = int(np.argmax(trace.logits))
    if predicted not in store.models:
        raise InputError(
            "prototype store does not cover the predicted class",
            predicted_class=predicted,
            classes=sorted(store.models),
        )
    fn = store.concept_fn()
    vec = fn(net, x, predicted, store.layer_index)
    ll = log_likelihood_class(store.models[predicted], vec.values)
    pct = percentile_of(store.training_ll[predicted], ll)
    assigned_class, assigned_comp = assign_prototype(
        store.models, vec.values, weighted=store.weighted
    )
    proto = store.models[assigned_class].components[assigned_comp]
    expl = explain_delta(proto, vec.values, similar_band=similar_band)
    verdict = "outlier" if pct < threshold_percentile else "in-distribution"

    report = {
        "sample": sample_id,
        "predicted_class": predicted,
        "logits": [float(v) for v in trace.logits],
        "class_log_likelihood": float(ll),
        "percentile": pct,
        "threshold_percentile": threshold_percentile,
        "verdict": verdict,
        "assigned_prototype": {"class": int(assigned_class), "component": int(assigned_comp)},
        "closest_training_sample": int(
            store.models[assigned_class].closest_training_index[assigned_comp]
        )
        if store.models[assigned_class].closest_training_index
        else None,
        "top_concepts_sample": _top_concepts(vec.values, top_n),
        "top_concepts_prototype": _top_concepts(proto.mean, top_n),
        "delta": _delta_summary(expl, top_n),
        "store": {
            "layer_index": store.layer_index,
            "method": store.method,
            "similar_band": similar_band,
        },
    }
    if against_class is not None:
        if against_class not in store.models:
            raise InputError("against-class missing from store", against_class=against_class)
        counter_model = store.models[against_class]
        scores = [
            (np.log(c.weight) if store.weighted else 0.0) + c.log_pdf(vec.values)
            for c in counter_model.components
        ]
        comp_idx = int(np.argmax(scores))
        counter_expl = explain_delta(
            counter_model.components[comp_idx], vec.values, similar_band=similar_band
        )
        report["against_class"] = {
            "class": against_class,
            "component": comp_idx,
            "log_likelihood": float(log_likelihood_class(counter_model, vec.values)),
            "delta": _delta_summary(counter_expl, top_n),
        }
    if out_path is not None:
        write_json(out_path, report)
        report["written_to"] = str(out_path)
    return report


def _top_concepts(values: np.ndarray, top_n: int) -> list[dict]:
    order = np.lexsort((np.arange(len(values)), -np.abs(values)))[:top_n]
    return [{"concept": int(i), "value": float(values[i])} for i in order]


def _delta_summary(expl, top_n: int) -> dict:
    order = np.lexsort((np.arange(len(expl.delta)), -np.abs(expl.delta)))[:top_n]
    return {
        "total": float(expl.total),
        "intra_sum": float(expl.intra.sum()),
        "inter_sum": float(expl.inter.sum()),
        "overused": [int(i) for i in np.flatnonzero(np.array(expl.labels) == "overused")],
        "underused": [int(i) for i in np.flatnonzero(np.array(expl.labels) == "underused")],
        "similar_count": int(sum(1 for l in expl.labels if l == "similar")),
        "top_deviations": [
            {
                "concept": int(i),
                "delta": float(expl.delta[i]),
                "label": expl.labels[i],
                "intra_term": float(expl.intra[i]),
            }
            for i in order
        ],
    }


# --- eval --------------------------------------------------------------------


def _strategy_groups(matrix: np.ndarray, sidecar: dict, wanted_split: str) -> dict[int, np.ndarray]:
    manifest = load_manifest(sidecar["dataset"])
    groups: dict[int, list[np.ndarray]] = {}
    for row, sample_id in enumerate(sidecar["sample_ids"]):
        entry = manifest.samples[sample_id]
        if entry.split != wanted_split or entry.strategy < 0:
            continue
        groups.setdefault(entry.strategy, []).append(matrix[row])
    return {s: np.array(v, dtype=np.float64) for s, v in sorted(groups.items())}


def _split_rows(matrix: np.ndarray, sidecar: dict, wanted_split: str) -> np.ndarray:
    manifest = load_manifest(sidecar["dataset"])
    rows = [
        matrix[row]
        for row, sample_id in enumerate(sidecar["sample_ids"])
        if manifest.samples[sample_id].split == wanted_split
    ]
    return np.array(rows, dtype=np.float64)


def op_eval(
    metric: str,
    out_dir: str | Path,
    attr_dir: str | Path | None = None,
    store_dir: str | Path | None = None,
    net_path: str | Path | None = None,
    dataset_path: str | Path | None = None,
    layers: list[int] | None = None,
    k: int = 5,
    folds: int = 10,
    seed: int = 0,
    reg: float = 1e-6,
    fraction_removed: float = 1.0,
    repeats: int = 8,
    eval_split: str = "holdout",
    max_samples: int = 64,
) -> dict:
    if metric not in EVAL_METRICS:
        raise InputError("unknown metric", metric=metric, valid=list(EVAL_METRICS))
    out = Path(out_dir)
    config = {
        "metric": metric,
        "k": k,
        "folds": folds,
        "seed": seed,
        "reg": reg,
        "fraction_removed": fraction_removed,
        "repeats": repeats,
        "eval_split": eval_split,
    }
    # record the attribution method so report tables can group by it
    if attr_dir is not None:
        probe_layers = layers or attribution_layers(attr_dir)
        _, probe_sidecar = load_attribution(attr_dir, probe_layers[0])
        config["method"] = probe_sidecar["method"]
    elif store_dir is not None:
        config["method"] = load_store(store_dir).method

    if metric == "faithfulness":
        report = _eval_faithfulness(
            net_path, store_dir, dataset_path, fraction_removed, repeats, config,
            eval_split, max_samples,
        )
    elif metric == "stability":
        report = _eval_stability(attr_dir, layers, k, folds, seed, config)
    elif metric == "sparseness":
        report = _eval_sparseness(store_dir, config)
    elif metric in ("coverage", "outlier"):
        report = _eval_coverage_outlier(metric, attr_dir, layers, seed, reg, repeats, config)
    else:
        report = _eval_clustering_compare(attr_dir, layers, k, seed, reg, config)

    if metric == "clustering-compare":
        path = out / "clustering_compare.json"
        write_json(path, report)
        table = metrics.render_table(
            [dict(regime=r, **report["regimes"][r]) for r in sorted(report["regimes"])],
            ["coverage", "outlier_auc"],
            "regime",
        )
        return {"report": str(path), "result": report, "table": table}

    path = out / f"eval_{metric}.json"
    write_json(path, report.to_dict())
    table = metrics.render_table(
        [
            {
                "metric": metric,
                "aggregate": report.aggregate,
                "standard_error": report.standard_error,
            }
        ],
        ["aggregate", "standard_error"],
        "metric",
    )
    return {"report": str(path), "result": report.to_dict(), "table": table}


def _eval_faithfulness(
    net_path, store_dir, dataset_path, fraction_removed, repeats, config,
    eval_split, max_samples,
) -> metrics.EvalReport:
    if not (net_path and store_dir and dataset_path):
        raise InputError("faithfulness needs net, store and dataset")
    net = load_network(net_path)
    store = load_store(store_dir)
    manifest = load_manifest(dataset_path)
    fn_raw = store.concept_fn()
    per_layer = {}
    subset_scores: list[float] = []
    selected = manifest.select(eval_split)
    if not selected:
        raise InputError("no samples in eval split", split=eval_split)
    selected = selected[:max_samples]
    by_class: dict[int, list[np.ndarray]] = {}
    for _, entry in selected:
        if entry.label in store.models:
            by_class.setdefault(entry.label, []).append(manifest.tensor(entry))
    layer = store.layer_index
    scores = []
    extras_scores = []
    sample_level: list[float] = []
    for cls, xs in sorted(by_class.items()):
        model = store.models[cls]
        for x in xs:
            sample_level.append(
                metrics.faithfulness(net, [x], model, layer, fraction_removed, concept_fn=fn_raw)
            )
            extras_scores.append(
                metrics.faithfulness(net, [x], model, layer, 0.1, concept_fn=fn_raw)
            )
    scores = sample_level
    per_layer[layer] = float(np.mean(scores))
    chunks = np.array_split(np.asarray(scores), min(repeats, len(scores)))
    subset_scores = [float(c.mean()) for c in chunks if c.size]
    return metrics.EvalReport(
        metric="faithfulness",
        per_layer=per_layer,
        aggregate=float(np.mean(list(per_layer.values()))),
        standard_error=metrics.standard_error(subset_scores),
        config=dict(config, config_hash=config_hash(config)),
        sample_counts={"samples": len(scores), "subsets": len(subset_scores)},
        extras={"fraction_0.1": float(np.mean(extras_scores))},
    )


def _eval_stability(attr_dir, layers, k, folds, seed, config) -> metrics.EvalReport:
    if attr_dir is None:
        raise InputError("stability needs an attribution directory")
    layers = layers or attribution_layers(attr_dir)
    per_layer = {}
    all_values: list[float] = []
    count = 0
    for layer in layers:
        matrix, sidecar = load_attribution(attr_dir, layer)
        manifest = load_manifest(sidecar["dataset"])
        labels = np.asarray(sidecar["labels"])
        is_train = np.array(
            [manifest.samples[i].split == "train" for i in sidecar["sample_ids"]]
        )
        layer_vals = []
        for cls in sorted(np.unique(labels)):
            pts = matrix[(labels == cls) & is_train].astype(np.float64)
            if pts.shape[0] < folds * k:
                raise InputError(
                    "not enough training rows for stability folds",
                    class_id=int(cls), rows=int(pts.shape[0]), folds=folds, k=k,
                )
            # deterministic shuffle so contiguous folds are exchangeable
            perm = np.random.default_rng(seed).permutation(pts.shape[0])
            score, values = metrics.stability(pts[perm], k=k, folds=folds, seed=seed)
            layer_vals.extend(values)
            count += pts.shape[0]
        per_layer[layer] = float(np.mean(layer_vals))
        all_values.extend(layer_vals)
    return metrics.EvalReport(
        metric="stability",
        per_layer=per_layer,
        aggregate=float(np.mean(list(per_layer.values()))),
        standard_error=metrics.standard_error(all_values),
        config=dict(config, config_hash=config_hash(config)),
        sample_counts={"samples": count, "values": len(all_values)},
    )


def _eval_sparseness(store_dir, config) -> metrics.EvalReport:
    if store_dir is None:
        raise InputError("sparseness needs a prototype store")
    store = load_store(store_dir)
    values: list[float] = []
    for cls in sorted(store.models):
        _, vals = metrics.sparseness(store.models[cls])
        values.extend(vals)
    layer = store.layer_index
    return metrics.EvalReport(
        metric="sparseness",
        per_layer={layer: float(np.mean(values))},
        aggregate=float(np.mean(values)),
        standard_error=metrics.standard_error(values),
        config=dict(config, config_hash=config_hash(config)),
        sample_counts={"components": len(values)},
    )


def _eval_coverage_outlier(metric, attr_dir, layers, seed, reg, repeats, config) -> metrics.EvalReport:
    if attr_dir is None:
        raise InputError(f"{metric} needs an attribution directory")
    layers = layers or attribution_layers(attr_dir)
    per_layer = {}
    repeat_scores: list[float] = []
    counts = {}
    for layer in layers:
        matrix, sidecar = load_attribution(attr_dir, layer)
        train = _strategy_groups(matrix, sidecar, "train")
        test = _strategy_groups(matrix, sidecar, "holdout")
        if not train or not test:
            raise InputError(
                "coverage/outlier need strategy-labelled train and holdout splits",
                layer_index=layer,
            )
        if metric == "coverage":
            per_layer[layer] = metrics.coverage(train, test, seed=seed, k=1, reg=reg)
            score_chunks = _coverage_repeats(train, test, seed, reg, repeats)
        else:
            out_rows = _split_rows(matrix, sidecar, "ood")
            if out_rows.size == 0:
                raise InputError("outlier metric needs an 'ood' split", layer_index=layer)
            report = metrics.compare_clusterings(train, test, out_rows, k=1, seed=seed, reg=reg)
            per_layer[layer] = report["gmm-loglik"]["outlier_auc"]
            score_chunks = _outlier_repeats(train, test, out_rows, seed, reg, repeats)
        repeat_scores.extend(score_chunks)
        counts[str(layer)] = {
            "train": int(sum(len(v) for v in train.values())),
            "holdout": int(sum(len(v) for v in test.values())),
        }
    return metrics.EvalReport(
        metric=metric,
        per_layer=per_layer,
        aggregate=float(np.mean(list(per_layer.values()))),
        standard_error=metrics.standard_error(repeat_scores),
        config=dict(config, config_hash=config_hash(config)),
        sample_counts=counts,
    )


def _coverage_repeats(train, test, seed, reg, repeats) -> list[float]:
    scores = []
    for r in range(repeats):
        sub_test = {
            s: pts[r::repeats] for s, pts in test.items() if pts[r::repeats].size
        }
        if len(sub_test) < len(test):
            continue
        scores.append(metrics.coverage(train, sub_test, seed=seed, k=1, reg=reg))
    return scores


def _outlier_repeats(train, test, out_rows, seed, reg, repeats) -> list[float]:
    scores = []
    models = {
        s: fit_gmm(pts, 1, seed, reg=reg, class_id=s) for s, pts in sorted(train.items())
    }

    def score(v):
        return max(log_likelihood_class(models[s], v) for s in models)

    in_scores = np.array([score(v) for pts in test.values() for v in pts])
    out_scores = np.array([score(v) for v in out_rows])
    for r in range(repeats):
        ins = in_scores[r::repeats]
        outs = out_scores[r::repeats]
        if ins.size and outs.size:
            scores.append(metrics.outlier_auc(ins, outs))
    return scores


def _eval_clustering_compare(attr_dir, layers, k, seed, reg, config) -> dict:
    if attr_dir is None:
        raise InputError("clustering-compare needs an attribution directory")
    layers = layers or attribution_layers(attr_dir)
    per_layer = {}
    for layer in layers:
        matrix, sidecar = load_attribution(attr_dir, layer)
        train = _strategy_groups(matrix, sidecar, "train")
        test = _strategy_groups(matrix, sidecar, "holdout")
        out_rows = _split_rows(matrix, sidecar, "ood")
        per_layer[str(layer)] = metrics.compare_clusterings(
            train, test, out_rows if out_rows.size else None, k=k, seed=seed, reg=reg
        )
    regimes = {}
    for regime in ("kmeans-euclid", "gmm-euclid", "gmm-loglik"):
        entry = {}
        for key in ("coverage", "outlier_auc"):
            vals = [
                per_layer[l][regime][key]
                for l in per_layer
                if key in per_layer[l][regime]
            ]
            if vals:
                entry[key] = float(np.mean(vals))
        regimes[regime] = entry
    return {
        "metric": "clustering-compare",
        "per_layer": per_layer,
        "regimes": regimes,
        "config": dict(config, config_hash=config_hash(config)),
    }


def render_method_table(report_dirs: list[str | Path]) -> str:
    """Table-1-shaped grid: one row per attribution method, metric columns."""
    rows: dict[str, dict] = {}
    for d in report_dirs:
        d = Path(d)
        for path in sorted(d.glob("eval_*.json")):
            doc = read_json(path)
            method = doc.get("config", {}).get("method", d.name)
            rows.setdefault(method, {"method": method})
            rows[method][doc["metric"]] = doc["aggregate"]
    if not rows:
        raise InputError("no eval reports found", dirs=[str(d) for d in report_dirs])
    columns = ["faithfulness", "stability", "sparseness", "coverage", "outlier"]
    present = [c for c in columns if any(c in r for r in rows.values())]
    return metrics.render_table(
        [rows[m] for m in sorted(rows)], present, "method"
    )


# --- ood ---------------------------------------------------------------------


def op_ood(
    scorer_kind: str,
    net_path: str | Path,
    in_dataset: str | Path,
    out_dataset: str | Path,
    out_dir: str | Path,
    store_dir: str | Path | None = None,
    layer_index: int | None = None,
    temperature: float = 1.0,
    in_split: str | None = "holdout",
    out_split: str | None = "ood",
    fit_split: str = "train",
    reg: float = 1e-6,
) -> dict:
    net = load_network(net_path)
    in_manifest = load_manifest(in_dataset)
    out_manifest = load_manifest(out_dataset)
    in_items = in_manifest.select(in_split)
    out_items = out_manifest.select(out_split)
    if not in_items or not out_items:
        raise InputError(
            "empty manifest selection",
            n_in=len(in_items),
            n_out=len(out_items),
            in_split=in_split,
            out_split=out_split,
        )

    if scorer_kind in ("pcx-gmm", "pcx-e"):
        if store_dir is None:
            raise InputError("pcx scorers need a prototype store")
        store = load_store(store_dir)
        scorer = ood.OodScorer(
            kind=scorer_kind,
            layer_index=store.layer_index,
            models=store.models,
            concept_fn=store.concept_fn(),
        )
        layer_used = store.layer_index
    elif scorer_kind == "mahalanobis-baseline":
        layer_used = _default_feature_layer(net) if layer_index is None else layer_index
        feats: dict[int, list[np.ndarray]] = {}
        for _, entry in in_manifest.select(fit_split):
            trace = forward(net, in_manifest.tensor(entry))
            feats.setdefault(entry.label, []).append(
                attribution.activation_pool(trace, layer_used, "sum").values
            )
        stats = ood.fit_mahalanobis({c: np.array(v) for c, v in feats.items()}, reg=reg)
        scorer = ood.OodScorer(kind=scorer_kind, layer_index=layer_used, stats=stats)
    elif scorer_kind in ("msp", "energy"):
        scorer = ood.OodScorer(kind=scorer_kind, temperature=temperature)
        layer_used = None
    else:
        raise InputError(
            "unknown scorer", scorer=scorer_kind, valid=list(ood.SCORER_KINDS)
        )

    in_samples = [in_manifest.tensor(e) for _, e in in_items]
    out_samples = [out_manifest.tensor(e) for _, e in out_items]
    result = ood.run_ood_benchmark(net, scorer, in_samples, out_samples)
    out = Path(out_dir)
    _write_scores_csv(out / f"scores_in_{scorer_kind}.csv", result["in_scores"])
    _write_scores_csv(out / f"scores_out_{scorer_kind}.csv", result["out_scores"])
    report = {
        "scorer": scorer_kind,
        "auc": result["auc"],
        "orientation": "higher score = more in-distribution",
        "layer_index": layer_used,
        "temperature": temperature if scorer_kind == "energy" else None,
        "counts": {"in": len(in_samples), "out": len(out_samples)},
        "in_label": f"{Path(in_dataset).parent.name}:{in_split or 'all'}",
        "out_label": f"{Path(out_dataset).parent.name}:{out_split or 'all'}",
        "in_scores_csv": f"scores_in_{scorer_kind}.csv",
        "out_scores_csv": f"scores_out_{scorer_kind}.csv",
    }
    write_json(out / f"ood_{scorer_kind}.json", report)
    report["report"] = str(out / f"ood_{scorer_kind}.json")
    return report


def _default_feature_layer(net: NetworkSpec) -> int:
    """Last layer with spatial channel structure; falls back to the last
    hidden activation for dense-only nets."""
    last = None
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv2d":
            last = i
    if last is not None:
        return last
    return len(net.layers) - 2 if len(net.layers) > 1 else -1


def _write_scores_csv(path: Path, scores: list[float]) -> None:
    lines = ["index,score"] + [f"{i},{repr(float(s))}" for i, s in enumerate(scores)]
    from .tensorio import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def render_ood_table(report_dirs: list[str | Path]) -> str:
    """Table-2-shaped grid: one row per scorer, one AUC column per dataset."""
    rows: dict[str, dict] = {}
    columns: list[str] = []
    found = False
    for d in report_dirs:
        d = Path(d)
        paths = sorted(d.glob("ood_*.json")) if d.is_dir() else [d]
        for p in paths:
            doc = read_json(p)
            found = True
            label = doc.get("out_label", "out")
            if label not in columns:
                columns.append(label)
            rows.setdefault(doc["scorer"], {"scorer": doc["scorer"]})
            rows[doc["scorer"]][label] = doc["auc"]
    if not found:
        raise InputError("no ood reports found", dirs=[str(d) for d in report_dirs])
    return metrics.render_table([rows[s] for s in sorted(rows)], columns, "scorer")


# --- similarity / relmax / outlier clusters ----------------------------------


def op_similarity(store_dir: str | Path, out_csv: str | Path) -> dict:
    store = load_store(store_dir)
    classes = sorted(store.models)
    if not classes:
        raise InputError("prototype store is empty")
    models = [store.models[c] for c in classes]
    matrix = class_similarity_matrix(models)
    lines = ["class," + ",".join(str(c) for c in classes)]
    for i, cls in enumerate(classes):
        lines.append(str(cls) + "," + ",".join(repr(float(v)) for v in matrix[i]))
    from .tensorio import atomic_write_text

    atomic_write_text(out_csv, "\n".join(lines) + "\n")
    return {
        "classes": classes,
        "out_csv": str(out_csv),
        "matrix": [[float(v) for v in row] for row in matrix],
    }


def op_relmax(
    attr_dir: str | Path, layer: int, concept_index: int, count: int
) -> dict:
    matrix, sidecar = load_attribution(attr_dir, layer)
    rows = attribution.relmax_select(matrix, concept_index, count)
    return {
        "concept": concept_index,
        "layer_index": layer,
        "rows": rows,
        "sample_ids": [int(sidecar["sample_ids"][r]) for r in rows],
        "values": [float(matrix[r, concept_index]) for r in rows],
    }


def op_outlier_clusters(
    attr_dir: str | Path,
    store_dir: str | Path,
    class_id: int,
    percentile: float,
    k: int,
    seed: int,
) -> dict:
    store = load_store(store_dir)
    if class_id not in store.models:
        raise InputError("class missing from store", class_id=class_id)
    matrix, sidecar = load_attribution(attr_dir, store.layer_index)
    labels = np.asarray(sidecar["labels"])
    rows = np.flatnonzero(labels == class_id)
    if rows.size == 0:
        raise InputError("no attribution rows for class", class_id=class_id)
    pts = matrix[rows].astype(np.float64)
    result = outlier_clusters(pts, store.models[class_id], percentile, k, seed)
    clusters = [
        {
            "rows": [int(rows[i]) for i in cluster],
            "sample_ids": [int(sidecar["sample_ids"][rows[i]]) for i in cluster],
        }
        for cluster in result.clusters
    ]
    return {
        "class_id": class_id,
        "percentile": percentile,
        "threshold": result.threshold if np.isfinite(result.threshold) else None,
        "clusters": clusters,
        "ungrouped": result.ungrouped,
    }
