"""FastAPI service wrapping the pipeline operations.

Endpoints are stateless job runners: requests name input/output paths on
the server's filesystem, responses return the summary payload. Library
errors map to structured JSON: InputError -> 400, NumericalError -> 500.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import InputError, NumericalError, PcxError
from . import schemas

app = FastAPI(title="pcx", version=__version__)


@app.exception_handler(PcxError)
async def pcx_error_handler(request: Request, exc: PcxError):
    status = 400 if isinstance(exc, InputError) else 500
    return JSONResponse(status_code=status, content=exc.payload())


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/synth", response_model=schemas.SynthResponse)
def synth_endpoint(req: schemas.SynthRequest) -> schemas.SynthResponse:
    config = req.model_dump(exclude={"out_dir"})
    return schemas.SynthResponse(**pipeline.op_synth(config, req.out_dir))


@app.post("/forward", response_model=schemas.ForwardResponse)
def forward_endpoint(req: schemas.ForwardRequest) -> schemas.ForwardResponse:
    return schemas.ForwardResponse(
        **pipeline.op_forward(req.net, inputs=req.inputs, dataset=req.dataset, split=req.split)
    )


@app.post("/attribute", response_model=schemas.AttributeResponse)
def attribute_endpoint(req: schemas.AttributeRequest) -> schemas.AttributeResponse:
    result = pipeline.op_attribute(
        req.net,
        req.dataset,
        req.method,
        req.layers,
        req.out_dir,
        conditioning=req.conditioning,
        epsilon=req.epsilon,
        split=req.split,
        threads=req.threads,
        drop_degenerate=req.drop_degenerate,
        seed=req.seed,
    )
    return schemas.AttributeResponse(**result)


@app.post("/fit", response_model=schemas.FitResponse)
def fit_endpoint(req: schemas.FitRequest) -> schemas.FitResponse:
    result = pipeline.op_fit(
        req.attributions,
        req.layer,
        req.k,
        req.seed,
        req.out_dir,
        reg=req.reg,
        weighted_assign=req.weighted_assign,
    )
    return schemas.FitResponse(**result)


@app.post("/validate")
def validate_endpoint(req: schemas.ValidateRequest) -> dict:
    return pipeline.op_validate(
        req.net,
        req.store,
        sample_path=req.sample,
        dataset_path=req.dataset,
        sample_index=req.sample_index,
        top_n=req.top_n,
        threshold_percentile=req.threshold_percentile,
        similar_band=req.similar_band,
        against_class=req.against_class,
        out_path=req.out,
    )


@app.post("/eval", response_model=schemas.EvalResponse)
def eval_endpoint(req: schemas.EvalRequest) -> schemas.EvalResponse:
    result = pipeline.op_eval(
        req.metric,
        req.out_dir,
        attr_dir=req.attributions,
        store_dir=req.store,
        net_path=req.net,
        dataset_path=req.dataset,
        layers=req.layers,
        k=req.k,
        folds=req.folds,
        seed=req.seed,
        reg=req.reg,
        fraction_removed=req.fraction_removed,
        repeats=req.repeats,
        eval_split=req.eval_split,
        max_samples=req.max_samples,
    )
    return schemas.EvalResponse(**result)


@app.post("/eval/table", response_model=schemas.TableResponse)
def eval_table_endpoint(req: schemas.TableRequest) -> schemas.TableResponse:
    return schemas.TableResponse(table=pipeline.render_method_table(req.report_dirs))


@app.post("/ood/table", response_model=schemas.TableResponse)
def ood_table_endpoint(req: schemas.TableRequest) -> schemas.TableResponse:
    return schemas.TableResponse(table=pipeline.render_ood_table(req.report_dirs))


@app.post("/ood", response_model=schemas.OodResponse)
def ood_endpoint(req: schemas.OodRequest) -> schemas.OodResponse:
    result = pipeline.op_ood(
        req.scorer,
        req.net,
        req.in_dataset,
        req.out_dataset,
        req.out_dir,
        store_dir=req.store,
        layer_index=req.layer_index,
        temperature=req.temperature,
        in_split=req.in_split,
        out_split=req.out_split,
        fit_split=req.fit_split,
        reg=req.reg,
    )
    return schemas.OodResponse(**result)


@app.post("/similarity", response_model=schemas.SimilarityResponse)
def similarity_endpoint(req: schemas.SimilarityRequest) -> schemas.SimilarityResponse:
    return schemas.SimilarityResponse(**pipeline.op_similarity(req.store, req.out_csv))


@app.post("/relmax", response_model=schemas.RelmaxResponse)
def relmax_endpoint(req: schemas.RelmaxRequest) -> schemas.RelmaxResponse:
    return schemas.RelmaxResponse(
        **pipeline.op_relmax(req.attributions, req.layer, req.concept, req.count)
    )


@app.post("/outlier-clusters", response_model=schemas.OutlierClustersResponse)
def outlier_clusters_endpoint(
    req: schemas.OutlierClustersRequest,
) -> schemas.OutlierClustersResponse:
    return schemas.OutlierClustersResponse(
        **pipeline.op_outlier_clusters(
            req.attributions, req.store, req.class_id, req.percentile, req.k, req.seed
        )
    )
