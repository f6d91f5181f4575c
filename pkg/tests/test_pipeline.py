"""Pipeline-level tests over real files: attribute/fit/validate/eval/ood."""

import numpy as np
import pytest

from pcx import pipeline, synth, tensorio
from pcx.errors import InputError, NumericalError
from pcx.prototypes import log_likelihood_class


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> attribute -> fit, shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("ws")
    summary = pipeline.op_synth(
        {
            "classes_per_family": 2,
            "strategies_per_class": 2,
            "dim": 12,
            "separation": 8.0,
            "train_count": 60,
            "holdout_count": 40,
            "ood_count": 40,
            "seed": 11,
        },
        root / "data",
    )
    attr = pipeline.op_attribute(
        summary["network"],
        summary["manifest"],
        "lrp-eps",
        [1],
        root / "attr",
        conditioning="predicted",
    )
    fit = pipeline.op_fit(root / "attr", 1, 2, seed=0, out_dir=root / "store")
    return {
        "root": root,
        "net": summary["network"],
        "manifest": summary["manifest"],
        "attr": root / "attr",
        "store": root / "store",
        "summary": summary,
        "attr_result": attr,
        "fit_result": fit,
    }


class TestAttribute:
    def test_rows_are_unit_abs_sum(self, workspace):
        matrix, sidecar = pipeline.load_attribution(workspace["attr"], 1)
        sums = np.abs(matrix).sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-6
        assert sidecar["normalized"] is True

    def test_activation_flavor_recorded(self, workspace):
        out = pipeline.op_attribute(
            workspace["net"], workspace["manifest"], "activation-sum", [1],
            workspace["root"] / "attr_act",
        )
        _, sidecar = pipeline.load_attribution(workspace["root"] / "attr_act", 1)
        assert sidecar["flavor"] == "activation"
        assert sidecar["epsilon"] is None

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            pipeline.op_attribute(
                workspace["net"], workspace["manifest"], "lrp-eps", [1], out
            )
        for name in ("attr_layer001.pcxt", "attr_layer001.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_threads_match_sequential(self, workspace, tmp_path):
        seq = tmp_path / "seq"
        par = tmp_path / "par"
        pipeline.op_attribute(
            workspace["net"], workspace["manifest"], "lrp-eps", [1], seq, threads=1
        )
        pipeline.op_attribute(
            workspace["net"], workspace["manifest"], "lrp-eps", [1], par, threads=4
        )
        assert (seq / "attr_layer001.pcxt").read_bytes() == (par / "attr_layer001.pcxt").read_bytes()

    def test_unknown_method_rejected(self, workspace, tmp_path):
        with pytest.raises(InputError):
            pipeline.op_attribute(
                workspace["net"], workspace["manifest"], "shapley", [1], tmp_path
            )

    def test_label_conditioning(self, workspace, tmp_path):
        out = pipeline.op_attribute(
            workspace["net"], workspace["manifest"], "lrp-eps", [1], tmp_path,
            conditioning="label",
        )
        _, sidecar = pipeline.load_attribution(tmp_path, 1)
        assert sidecar["conditioned_class"] == sidecar["labels"]


class TestFit:
    def test_store_roundtrip(self, workspace):
        store = pipeline.load_store(workspace["store"])
        assert sorted(store.models) == [0, 1]
        for model in store.models.values():
            assert len(model.components) == 2
            assert abs(sum(c.weight for c in model.components) - 1.0) <= 1e-9

    def test_k1_means_equal_class_attribution_means(self, workspace, tmp_path):
        pipeline.op_fit(workspace["attr"], 1, 1, seed=0, out_dir=tmp_path)
        store = pipeline.load_store(tmp_path)
        matrix, sidecar = pipeline.load_attribution(workspace["attr"], 1)
        labels = np.asarray(sidecar["labels"])
        for cls, model in store.models.items():
            want = matrix[labels == cls].astype(np.float64).mean(axis=0)
            assert np.abs(model.components[0].mean - want).max() <= 1e-12

    def test_closest_index_is_nearest_to_mean(self, workspace):
        store = pipeline.load_store(workspace["store"])
        matrix, sidecar = pipeline.load_attribution(workspace["attr"], 1)
        ids = sidecar["sample_ids"]
        labels = np.asarray(sidecar["labels"])
        for cls, model in store.models.items():
            rows = np.flatnonzero(labels == cls)
            for comp, closest_id in zip(model.components, model.closest_training_index):
                dists = np.linalg.norm(matrix[rows] - comp.mean, axis=1)
                best_row = rows[int(np.argmin(dists))]
                assert ids[best_row] == closest_id

    def test_planted_substrategies_covered_on_train(self, workspace):
        # k=2 per class on 2 planted sub-strategies: every training point
        # lands on its own component
        store = pipeline.load_store(workspace["store"])
        matrix, sidecar = pipeline.load_attribution(workspace["attr"], 1)
        manifest = pipeline.load_manifest(workspace["manifest"])
        labels = np.asarray(sidecar["labels"])
        for cls, model in store.models.items():
            rows = np.flatnonzero(labels == cls)
            comp_of_strategy = {}
            agreements = 0
            for r in rows:
                entry = manifest.samples[sidecar["sample_ids"][r]]
                if entry.split != "train":
                    continue
                scores = [c.log_pdf(matrix[r].astype(np.float64)) for c in model.components]
                comp = int(np.argmax(scores))
                comp_of_strategy.setdefault(entry.strategy, comp)
                agreements += comp_of_strategy[entry.strategy] == comp
            total = sum(
                1 for r in rows
                if manifest.samples[sidecar["sample_ids"][r]].split == "train"
            )
            assert agreements / total == 1.0

    def test_class_below_k_skipped_with_partial_flag(self, tmp_path):
        # hand-built attribution dir: class 0 has 8 rows, class 1 only 2
        rng = np.random.default_rng(0)
        matrix = np.abs(rng.standard_normal((10, 3))).astype(np.float32)
        matrix /= np.abs(matrix).sum(axis=1, keepdims=True)
        labels = [0] * 8 + [1] * 2
        tensorio.write_tensor(tmp_path / "attr_layer001.pcxt", matrix)
        tensorio.write_tensor(tmp_path / "t.pcxt", np.zeros(3, dtype=np.float32))
        tensorio.write_json(
            tmp_path / "manifest.json",
            {"input_shape": [3], "class_count": 2,
             "samples": [{"path": "t.pcxt", "label": l, "split": "train"}
                         for l in labels]},
        )
        tensorio.write_json(
            tmp_path / "attr_layer001.json",
            {"method": "lrp-eps", "layer_index": 1, "epsilon": 1e-9,
             "normalized": True, "class_conditioning": "label",
             "flavor": "relevance", "dataset": str(tmp_path / "manifest.json"),
             "split": None, "matrix": "attr_layer001.pcxt",
             "sample_ids": list(range(10)), "conditioned_class": labels,
             "labels": labels, "strategies": [-1] * 10, "dropped_samples": [],
             "concept_count": 3, "seed": 0},
        )
        result = pipeline.op_fit(tmp_path, 1, 4, seed=0, out_dir=tmp_path / "s")
        assert result["partial"] is True
        assert result["classes_written"] == [0]
        assert result["skipped"][0]["class"] == 1
        store = pipeline.load_store(tmp_path / "s")
        assert sorted(store.models) == [0]
        # k above every class size
        with pytest.raises(InputError):
            pipeline.op_fit(tmp_path, 1, 99, seed=0, out_dir=tmp_path / "s2")


class TestValidate:
    def test_training_point_near_prototype_in_distribution(self, workspace):
        store = pipeline.load_store(workspace["store"])
        matrix, sidecar = pipeline.load_attribution(workspace["attr"], 1)
        # use the recorded closest training sample of class 0, component 0
        sample_id = store.models[0].closest_training_index[0]
        report = pipeline.op_validate(
            workspace["net"], workspace["store"],
            dataset_path=workspace["manifest"], sample_index=sample_id,
            threshold_percentile=5.0,
        )
        assert report["verdict"] == "in-distribution"
        assert report["percentile"] >= 50.0
        assert all(
            d["label"] == "similar" for d in report["delta"]["top_deviations"]
        )

    def test_planted_outlier_flagged(self, tmp_path):
        # shadow-mode outliers reroute class evidence through a concept the
        # training data never uses, which is exactly what the validator flags
        summary = pipeline.op_synth(
            {"classes_per_family": 2, "dim": 10, "train_count": 80,
             "holdout_count": 10, "ood_count": 10, "ood_kind": "shadow",
             "seed": 21},
            tmp_path / "d",
        )
        pipeline.op_attribute(
            summary["network"], summary["manifest"], "lrp-eps", [1], tmp_path / "a",
        )
        pipeline.op_fit(tmp_path / "a", 1, 1, seed=0, out_dir=tmp_path / "s")
        manifest = pipeline.load_manifest(summary["manifest"])
        ood_index = next(
            i for i, s in enumerate(manifest.samples) if s.split == "ood"
        )
        report = pipeline.op_validate(
            summary["network"], tmp_path / "s",
            dataset_path=summary["manifest"], sample_index=ood_index,
            threshold_percentile=5.0,
        )
        assert report["verdict"] == "outlier"
        assert report["percentile"] < 5.0

    def test_likelihood_matches_library_value(self, workspace):
        store = pipeline.load_store(workspace["store"])
        manifest = pipeline.load_manifest(workspace["manifest"])
        idx = 0
        report = pipeline.op_validate(
            workspace["net"], workspace["store"],
            dataset_path=workspace["manifest"], sample_index=idx,
        )
        from pcx.engine import forward, load_network
        net = load_network(workspace["net"])
        x = manifest.tensor(manifest.samples[idx])
        predicted = int(np.argmax(forward(net, x).logits))
        vec = store.concept_fn()(net, x, predicted, store.layer_index)
        want = log_likelihood_class(store.models[predicted], vec.values)
        assert abs(report["class_log_likelihood"] - want) <= 1e-12

    def test_against_class_flips_discriminative_concept(self, tmp_path):
        # two classes, one concept each: versus the other class's prototype,
        # the own concept is overused and the other's underused
        summary = pipeline.op_synth(
            {"classes_per_family": 2, "dim": 8, "train_count": 50,
             "holdout_count": 10, "seed": 9},
            tmp_path / "d",
        )
        pipeline.op_attribute(
            summary["network"], summary["manifest"], "lrp-eps", [1], tmp_path / "a",
        )
        pipeline.op_fit(tmp_path / "a", 1, 1, seed=0, out_dir=tmp_path / "s")
        manifest = pipeline.load_manifest(summary["manifest"])
        idx = next(i for i, s in enumerate(manifest.samples) if s.label == 0)
        report = pipeline.op_validate(
            summary["network"], tmp_path / "s",
            dataset_path=summary["manifest"], sample_index=idx,
            against_class=1,
        )
        own = report["delta"]
        counter = report["against_class"]["delta"]
        assert 0 not in own["overused"]
        assert 0 in counter["overused"]  # class-0 concept overused vs class-1 proto
        assert 1 in counter["underused"]

    def test_missing_class_in_store(self, workspace):
        with pytest.raises(InputError):
            pipeline.op_validate(
                workspace["net"], workspace["store"],
                dataset_path=workspace["manifest"], sample_index=0,
                against_class=7,
            )


class TestEval:
    def test_coverage_on_separated_strategies(self, workspace, tmp_path):
        result = pipeline.op_eval(
            "coverage", tmp_path, attr_dir=workspace["attr"], seed=0
        )
        assert result["result"]["aggregate"] >= 0.95

    def test_outlier_auc_high(self, workspace, tmp_path):
        result = pipeline.op_eval(
            "outlier", tmp_path, attr_dir=workspace["attr"], seed=0
        )
        assert result["result"]["aggregate"] >= 0.99

    def test_sparseness_on_store(self, workspace, tmp_path):
        result = pipeline.op_eval(
            "sparseness", tmp_path, store_dir=workspace["store"], seed=0
        )
        assert 0.0 < result["result"]["aggregate"] <= 1.0

    def test_stability_runs(self, workspace, tmp_path):
        result = pipeline.op_eval(
            "stability", tmp_path, attr_dir=workspace["attr"], k=2, folds=4, seed=0
        )
        assert result["result"]["aggregate"] >= 0.9  # well-separated strategies

    def test_faithfulness_positive(self, workspace, tmp_path):
        result = pipeline.op_eval(
            "faithfulness", tmp_path,
            net_path=workspace["net"], store_dir=workspace["store"],
            dataset_path=workspace["manifest"], max_samples=16,
        )
        assert result["result"]["aggregate"] > 0.0
        assert "fraction_0.1" in result["result"]["extras"]

    def test_clustering_compare_report_shape(self, workspace, tmp_path):
        result = pipeline.op_eval(
            "clustering-compare", tmp_path, attr_dir=workspace["attr"], k=1, seed=0
        )
        regimes = result["result"]["regimes"]
        assert set(regimes) == {"kmeans-euclid", "gmm-euclid", "gmm-loglik"}
        for entry in regimes.values():
            assert set(entry) == {"coverage", "outlier_auc"}

    def test_invalid_metric_lists_valid(self, workspace, tmp_path):
        with pytest.raises(InputError) as exc:
            pipeline.op_eval("sharpness", tmp_path, attr_dir=workspace["attr"])
        assert "coverage" in exc.value.detail["valid"]

    def test_sparseness_one_hot_table_cell(self, tmp_path):
        # store of one-hot means with m=4 -> sparseness 0.5
        from pcx import prototypes
        comp = prototypes.PrototypeComponent.create(
            1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.eye(4) * 0.01
        )
        doc = {
            "class_id": 0, "layer_index": 1, "method": "lrp-eps",
            "components": [{
                "weight": 1.0,
                "mean": [float(v) for v in comp.mean],
                "covariance": [[float(v) for v in r] for r in comp.covariance],
            }],
            "closest_training_index": [0],
            "training_log_likelihoods": [0.0],
            "training_sample_ids": [0],
            "metadata": {},
        }
        tensorio.write_json(tmp_path / "class_000.json", doc)
        tensorio.write_json(
            tmp_path / "store.json",
            {"layer_index": 1, "method": "lrp-eps", "epsilon": 1e-9, "k": 1,
             "seed": 0, "reg": 1e-6, "weighted_assign": True, "classes": [0],
             "skipped": [], "partial": False, "normalized": True,
             "attribution_dir": str(tmp_path)},
        )
        result = pipeline.op_eval("sparseness", tmp_path / "out", store_dir=tmp_path)
        assert abs(result["result"]["aggregate"] - 0.5) <= 1e-9
        assert "0.5000" in result["table"]


class TestOodOp:
    def test_report_files_written(self, workspace, tmp_path):
        report = pipeline.op_ood(
            "energy", workspace["net"], workspace["manifest"], workspace["manifest"],
            tmp_path,
        )
        assert (tmp_path / "ood_energy.json").exists()
        in_csv = (tmp_path / "scores_in_energy.csv").read_text().splitlines()
        assert in_csv[0] == "index,score"
        assert len(in_csv) == report["counts"]["in"] + 1

    def test_empty_selection_rejected(self, workspace, tmp_path):
        with pytest.raises(InputError):
            pipeline.op_ood(
                "msp", workspace["net"], workspace["manifest"], workspace["manifest"],
                tmp_path, out_split="nope",
            )

    def test_table_render(self, workspace, tmp_path):
        pipeline.op_ood(
            "msp", workspace["net"], workspace["manifest"], workspace["manifest"],
            tmp_path,
        )
        pipeline.op_ood(
            "energy", workspace["net"], workspace["manifest"], workspace["manifest"],
            tmp_path,
        )
        table = pipeline.render_ood_table([tmp_path])
        lines = table.splitlines()
        assert lines[0].startswith("scorer")
        assert any(l.startswith("msp") for l in lines)
        assert any(l.startswith("energy") for l in lines)


class TestSimilarityRelmaxOutliers:
    def test_similarity_csv(self, workspace, tmp_path):
        result = pipeline.op_similarity(workspace["store"], tmp_path / "sim.csv")
        lines = (tmp_path / "sim.csv").read_text().splitlines()
        assert lines[0] == "class,0,1"
        mat = np.array(result["matrix"])
        assert np.allclose(np.diag(mat), 1.0)
        assert np.allclose(mat, mat.T)

    def test_relmax_against_sort(self, workspace):
        result = pipeline.op_relmax(workspace["attr"], 1, concept_index=0, count=5)
        matrix, sidecar = pipeline.load_attribution(workspace["attr"], 1)
        col = matrix[:, 0]
        want_rows = sorted(range(len(col)), key=lambda i: (-col[i], i))[:5]
        assert result["rows"] == want_rows

    def test_outlier_clusters_finds_ood_attr_rows(self, workspace):
        # refit including ood rows so the class model sees them as planted outliers
        result = pipeline.op_outlier_clusters(
            workspace["attr"], workspace["store"], class_id=0,
            percentile=10.0, k=1, seed=0,
        )
        manifest = pipeline.load_manifest(workspace["manifest"])
        flagged_splits = {
            manifest.samples[i].split
            for cluster in result["clusters"]
            for i in cluster["sample_ids"]
        }
        assert "ood" in flagged_splits


class TestManifest:
    def test_missing_tensor_rejected(self, tmp_path):
        tensorio.write_json(
            tmp_path / "manifest.json",
            {"input_shape": [2], "class_count": 1,
             "samples": [{"path": "missing.pcxt", "label": 0, "split": "train"}]},
        )
        with pytest.raises(InputError):
            pipeline.load_manifest(tmp_path / "manifest.json")

    def test_label_range_checked(self, tmp_path):
        tensorio.write_tensor(tmp_path / "t.pcxt", np.zeros(2, dtype=np.float32))
        tensorio.write_json(
            tmp_path / "manifest.json",
            {"input_shape": [2], "class_count": 1,
             "samples": [{"path": "t.pcxt", "label": 5, "split": "train"}]},
        )
        with pytest.raises(InputError):
            pipeline.load_manifest(tmp_path / "manifest.json")
