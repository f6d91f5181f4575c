"""Command-line client for the pcx service.

Every subcommand builds a request and posts it to the service API. Without
``--server`` the app runs in-process (no network); with it, the same
requests go to a remote instance. Exit codes: 0 success, 2 input error,
3 numerical failure; diagnostics are emitted as JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def make_client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service.app import app

    return TestClient(app, raise_server_exceptions=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcx",
        description="Concept-attribution prototypes: attribute, fit, validate, evaluate.",
    )
    parser.add_argument("--server", help="remote service URL (default: run in-process)")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for batch ops")
    parser.add_argument("--config", help="JSON file whose values override flags")
    parser.add_argument("--json", action="store_true", help="machine output only")
    # the same globals are accepted after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=lambda **kw: argparse.ArgumentParser(parents=[common], **kw))

    p = sub.add_parser("synth", help="generate a synthetic dataset + toy network")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--families", type=int, default=1)
    p.add_argument("--classes-per-family", type=int, default=2)
    p.add_argument("--strategies-per-class", type=int, default=1)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--anisotropy", type=float, default=1.0)
    p.add_argument("--distractor-dims", type=int, default=0)
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--holdout-count", type=int, default=200)
    p.add_argument("--ood-count", type=int, default=0)
    p.add_argument("--ood-kind", choices=["far", "shadow", "heldout-class"], default="far")
    p.add_argument("--ood-separation", type=float, default=10.0)

    p = sub.add_parser("forward", help="run the network on tensors and print logits")
    p.add_argument("--net", required=True)
    p.add_argument("--inputs", nargs="*")
    p.add_argument("--dataset")
    p.add_argument("--split")

    p = sub.add_parser("attribute", help="compute concept attribution matrices")
    p.add_argument("--net", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", default="lrp-eps")
    p.add_argument("--layers", type=int, nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--conditioning", default="predicted",
                   help="'predicted', 'label', or a class index")
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--split")
    p.add_argument("--drop-degenerate", action="store_true")

    p = sub.add_parser("fit", help="fit per-class GMM prototypes on attributions")
    p.add_argument("--attributions", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--reg", type=float, default=1e-6)
    p.add_argument("--unweighted-assign", action="store_true",
                   help="rank prototypes by plain log density (no mixture weight)")

    p = sub.add_parser("validate", help="validate one prediction against prototypes")
    p.add_argument("--net", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--sample")
    p.add_argument("--dataset")
    p.add_argument("--sample-index", type=int)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--threshold-percentile", type=float, default=5.0)
    p.add_argument("--similar-band", type=float, default=0.02)
    p.add_argument("--against-class", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="run an evaluation metric or render a table")
    p.add_argument("--metric")
    p.add_argument("--out-dir")
    p.add_argument("--attributions")
    p.add_argument("--store")
    p.add_argument("--net")
    p.add_argument("--dataset")
    p.add_argument("--layers", type=int, nargs="*")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--reg", type=float, default=1e-6)
    p.add_argument("--fraction-removed", type=float, default=1.0)
    p.add_argument("--repeats", type=int, default=8)
    p.add_argument("--eval-split", default="holdout")
    p.add_argument("--max-samples", type=int, default=64)
    p.add_argument("--table-from", nargs="+",
                   help="render a methods x metrics table from report directories")

    p = sub.add_parser("ood", help="run an OOD scorer benchmark or render a grid")
    p.add_argument("--scorer",
                   choices=["msp", "energy", "mahalanobis-baseline", "pcx-gmm", "pcx-e"])
    p.add_argument("--net")
    p.add_argument("--in-dataset")
    p.add_argument("--out-dataset")
    p.add_argument("--out-dir")
    p.add_argument("--table-from", nargs="+",
                   help="render a scorers x datasets grid from report directories")
    p.add_argument("--store")
    p.add_argument("--layer-index", type=int)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--in-split", default="holdout")
    p.add_argument("--out-split", default="ood")
    p.add_argument("--fit-split", default="train")
    p.add_argument("--reg", type=float, default=1e-6)

    p = sub.add_parser("similarity", help="class prototype cosine similarity matrix")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("relmax", help="reference samples with maximal concept relevance")
    p.add_argument("--attributions", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--concept", type=int, required=True)
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("outlier-clusters", help="cluster low-likelihood training samples")
    p.add_argument("--attributions", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--percentile", type=float, default=5.0)
    p.add_argument("--k", type=int, default=2)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if not args.config:
        return args
    with open(args.config, "r", encoding="utf-8") as fh:
        overrides = json.load(fh)
    for key, value in overrides.items():
        setattr(args, key.replace("-", "_"), value)
    return args


def _fail(payload: dict, code: int) -> int:
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _post(client, path: str, body: dict):
    body = {k: v for k, v in body.items() if v is not None}
    return client.post(path, json=body)


def _finish(resp, args, render=None) -> int:
    try:
        doc = resp.json()
    except ValueError:
        doc = {"error": {"kind": "internal", "message": resp.text[:500], "detail": {}}}
    if resp.status_code == 200:
        if not args.json and render:
            text = render(doc)
            if text:
                print(text)
        print(json.dumps(doc, sort_keys=True))
        return EXIT_OK
    if resp.status_code in (400, 404, 422):
        if "error" not in doc:  # pydantic validation payload
            doc = {"error": {"kind": "input", "message": "invalid request", "detail": doc}}
        return _fail(doc, EXIT_INPUT)
    if "error" not in doc:
        doc = {"error": {"kind": "internal", "message": "server error", "detail": doc}}
    return _fail(doc, EXIT_NUMERICAL)


def _render_validate(doc: dict) -> str:
    lines = [
        f"sample            {doc['sample']}",
        f"predicted class   {doc['predicted_class']}",
        f"log-likelihood    {doc['class_log_likelihood']:.4f}"
        f"  (percentile {doc['percentile']:.1f} of training)",
        f"verdict           {doc['verdict']} (threshold {doc['threshold_percentile']}%)",
        f"assigned proto    class {doc['assigned_prototype']['class']}"
        f" / component {doc['assigned_prototype']['component']}",
        "top sample concepts    "
        + ", ".join(f"{c['concept']}:{c['value']:+.3f}" for c in doc["top_concepts_sample"]),
        "top prototype concepts "
        + ", ".join(f"{c['concept']}:{c['value']:+.3f}" for c in doc["top_concepts_prototype"]),
        "deviations        "
        + ", ".join(
            f"{d['concept']}:{d['delta']:+.3f}({d['label']})"
            for d in doc["delta"]["top_deviations"]
        ),
    ]
    if "against_class" in doc:
        counter = doc["against_class"]
        lines.append(
            f"against class {counter['class']}: log-likelihood"
            f" {counter['log_likelihood']:.4f}, deviations "
            + ", ".join(
                f"{d['concept']}:{d['delta']:+.3f}({d['label']})"
                for d in counter["delta"]["top_deviations"]
            )
        )
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = apply_config_file(args)

    if args.command == "serve":
        import uvicorn

        from .service.app import app

        uvicorn.run(app, host=args.host, port=args.port)
        return EXIT_OK

    try:
        client = make_client(args.server)
    except httpx.HTTPError as exc:
        return _fail({"error": {"kind": "input", "message": str(exc), "detail": {}}}, EXIT_INPUT)

    try:
        with client:
            return _dispatch(client, args)
    except httpx.HTTPError as exc:
        return _fail(
            {"error": {"kind": "input", "message": f"service unreachable: {exc}", "detail": {}}},
            EXIT_INPUT,
        )


def _dispatch(client, args) -> int:
    cmd = args.command
    if cmd == "synth":
        resp = _post(client, "/synth", {
            "out_dir": args.out_dir,
            "families": args.families,
            "classes_per_family": args.classes_per_family,
            "strategies_per_class": args.strategies_per_class,
            "dim": args.dim,
            "separation": args.separation,
            "anisotropy": args.anisotropy,
            "distractor_dims": args.distractor_dims,
            "train_count": args.train_count,
            "holdout_count": args.holdout_count,
            "ood_count": args.ood_count,
            "ood_kind": args.ood_kind,
            "ood_separation": args.ood_separation,
            "seed": args.seed,
        })
        return _finish(resp, args)
    if cmd == "forward":
        resp = _post(client, "/forward", {
            "net": args.net, "inputs": args.inputs, "dataset": args.dataset,
            "split": args.split,
        })
        return _finish(resp, args)
    if cmd == "attribute":
        resp = _post(client, "/attribute", {
            "net": args.net, "dataset": args.dataset, "method": args.method,
            "layers": args.layers, "out_dir": args.out_dir,
            "conditioning": args.conditioning, "epsilon": args.epsilon,
            "split": args.split, "threads": args.threads,
            "drop_degenerate": args.drop_degenerate, "seed": args.seed,
        })
        return _finish(resp, args)
    if cmd == "fit":
        resp = _post(client, "/fit", {
            "attributions": args.attributions, "layer": args.layer,
            "out_dir": args.out_dir, "k": args.k, "seed": args.seed,
            "reg": args.reg, "weighted_assign": not args.unweighted_assign,
        })
        return _finish(resp, args)
    if cmd == "validate":
        resp = _post(client, "/validate", {
            "net": args.net, "store": args.store, "sample": args.sample,
            "dataset": args.dataset, "sample_index": args.sample_index,
            "top_n": args.top_n, "threshold_percentile": args.threshold_percentile,
            "similar_band": args.similar_band, "against_class": args.against_class,
            "out": args.out,
        })
        return _finish(resp, args, render=_render_validate)
    if cmd == "eval":
        if args.table_from:
            resp = _post(client, "/eval/table", {"report_dirs": args.table_from})
            return _finish(resp, args, render=lambda doc: doc["table"])
        if not args.metric or not args.out_dir:
            return _fail(
                {"error": {"kind": "input",
                           "message": "eval needs --metric and --out-dir (or --table-from)",
                           "detail": {}}},
                EXIT_INPUT,
            )
        resp = _post(client, "/eval", {
            "metric": args.metric, "out_dir": args.out_dir,
            "attributions": args.attributions, "store": args.store,
            "net": args.net, "dataset": args.dataset, "layers": args.layers,
            "k": args.k, "folds": args.folds, "seed": args.seed, "reg": args.reg,
            "fraction_removed": args.fraction_removed, "repeats": args.repeats,
            "eval_split": args.eval_split, "max_samples": args.max_samples,
        })
        return _finish(resp, args, render=lambda doc: doc["table"])
    if cmd == "ood":
        if args.table_from:
            resp = _post(client, "/ood/table", {"report_dirs": args.table_from})
            return _finish(resp, args, render=lambda doc: doc["table"])
        missing = [
            name for name in ("scorer", "net", "in_dataset", "out_dataset", "out_dir")
            if getattr(args, name) is None
        ]
        if missing:
            return _fail(
                {"error": {"kind": "input",
                           "message": "ood needs --scorer/--net/--in-dataset/"
                                      "--out-dataset/--out-dir (or --table-from)",
                           "detail": {"missing": missing}}},
                EXIT_INPUT,
            )
        resp = _post(client, "/ood", {
            "scorer": args.scorer, "net": args.net,
            "in_dataset": args.in_dataset, "out_dataset": args.out_dataset,
            "out_dir": args.out_dir, "store": args.store,
            "layer_index": args.layer_index, "temperature": args.temperature,
            "in_split": args.in_split, "out_split": args.out_split,
            "fit_split": args.fit_split, "reg": args.reg,
        })
        return _finish(resp, args, render=lambda doc: f"{doc['scorer']} AUC: {doc['auc']:.4f}")
    if cmd == "similarity":
        resp = _post(client, "/similarity", {"store": args.store, "out_csv": args.out})
        return _finish(resp, args)
    if cmd == "relmax":
        resp = _post(client, "/relmax", {
            "attributions": args.attributions, "layer": args.layer,
            "concept": args.concept, "count": args.count,
        })
        return _finish(resp, args)
    if cmd == "outlier-clusters":
        resp = _post(client, "/outlier-clusters", {
            "attributions": args.attributions, "store": args.store,
            "class_id": args.class_id, "percentile": args.percentile,
            "k": args.k, "seed": args.seed,
        })
        return _finish(resp, args)
    raise AssertionError(cmd)


if __name__ == "__main__":
    sys.exit(main())
