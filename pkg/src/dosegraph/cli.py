"""Command-line entry points for the whole pipeline.

Every subcommand exits 0 on success and nonzero with a diagnostic on stderr.
The service-facing commands (`predict`, `serve`) resolve prompt embeddings
the same way, so offline and served predictions agree bit for bit.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bundles import BundleError, list_bundles, load_bundle, save_bundle
from .container import ContainerError, write_container
from .conversion import ConversionError, extract_pixel_features, segment_structures
from .encoders import EncoderError, resolve_prompt_embedding
from .graph import GraphError, attach_prompt_embedding, build_graph
from .metrics import MetricsError, case_curves, cross_validate, emit_report, evaluate_case
from .model import (
    DoseGnnConfig,
    ModelError,
    load_checkpoint,
    mse_loss,
    predict_doses,
    predict_mlp,
    prepare_case,
    save_checkpoint,
    train_dose_gnn,
    train_mlp_baseline,
)
from .phantoms import generate_phantom_set
from .service import EMBED_URL_ENV, create_app

FEATURES_MAGIC = b"DGFEATS1"
GRAPH_MAGIC = b"DGGRAPH1"
PREDICTION_MAGIC = b"DGDOSE01"

_ERRORS = (
    BundleError,
    ContainerError,
    ConversionError,
    EncoderError,
    GraphError,
    MetricsError,
    ModelError,
    ValueError,
    OSError,
)


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated integers, got {text!r}")
    return (int(parts[0]), int(parts[1]), int(parts[2]))


def _load_config(path: str | None, seed: int | None) -> DoseGnnConfig:
    if path is None:
        config = DoseGnnConfig()
    else:
        with open(path, encoding="utf-8") as fh:
            config = DoseGnnConfig.from_dict(json.load(fh))
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


def _load_cases(data_dir: str):
    paths = list_bundles(data_dir)
    if not paths:
        raise BundleError(f"no case bundles under {data_dir}")
    return [load_bundle(p) for p in paths]


def cmd_gen_phantoms(args) -> int:
    overrides = {}
    if args.image_shape:
        overrides["image_shape"] = _parse_shape(args.image_shape)
    if args.dose_shape:
        overrides["dose_shape"] = _parse_shape(args.dose_shape)
    if args.image_resolution:
        overrides["image_resolution"] = args.image_resolution
    if args.dose_resolution:
        overrides["dose_resolution"] = args.dose_resolution
    if args.noise_sd:
        overrides["noise_sd"] = args.noise_sd
    cases = generate_phantom_set(args.n, seed=args.seed, boost_fraction=args.boost_fraction, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_bundle(case, out / f"{case.case_id}.dgb")
    print(f"wrote {len(cases)} bundles to {out}")
    return 0


def cmd_convert(args) -> int:
    case = load_bundle(args.case)
    masks = segment_structures(case)
    features = extract_pixel_features(masks, case.image_geom)
    out = Path(args.out) if args.out else Path(args.case).with_suffix(".features")
    header = {
        "kind": "features",
        "case_id": case.case_id,
        "mask_provenance": masks.provenance,
        "image_shape": list(case.image_geom.shape),
    }
    write_container(
        out,
        FEATURES_MAGIC,
        header,
        [("features", features.values), ("masks", masks.masks.astype(np.float32))],
    )
    print(f"wrote {out} ({masks.provenance} masks)")
    return 0


def cmd_build_graph(args) -> int:
    case = load_bundle(args.case)
    masks = segment_structures(case)
    features = extract_pixel_features(masks, case.image_geom)
    graph = build_graph(case, features, masks, threshold=args.threshold)
    out = Path(args.out) if args.out else Path(args.case).with_suffix(".graph")
    header = {
        "kind": "graph",
        "case_id": graph.case_id,
        "threshold": graph.threshold,
        "image_shape": list(graph.image_shape),
        "dose_shape": list(graph.dose_shape),
        "prescription_dose": graph.prescription_dose,
        "num_image_nodes": graph.num_image_nodes,
        "num_dose_nodes": graph.num_dose_nodes,
        "num_edges": int(graph.edge_dose.shape[0]),
    }
    tensors = [
        ("image_features", graph.image_features),
        ("dose_features", graph.dose_features),
        ("prompt_embedding", graph.prompt_embedding),
        ("edge_dose", graph.edge_dose),
        ("edge_image", graph.edge_image),
        ("dose_structure", graph.dose_structure),
        ("dose_context", graph.dose_context),
    ]
    if graph.targets is not None:
        tensors.append(("targets", graph.targets))
    write_container(out, GRAPH_MAGIC, header, tensors)
    print(
        f"wrote {out}: {graph.num_image_nodes} image + {graph.num_dose_nodes} dose + 1 prompt nodes, "
        f"{graph.edge_dose.shape[0]} image-dose edges"
    )
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    cases = _load_cases(args.data)
    graphs = []
    for case in cases:
        if not case.has_ground_truth():
            raise ModelError(f"case {case.case_id!r} has no ground-truth dose")
        graphs.append(prepare_case(case, config)[0])
    if args.model == "gnn":
        result = train_dose_gnn(graphs, config)
    else:
        result = train_mlp_baseline(graphs, config)
    save_checkpoint(args.out, result)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    log_path.write_bytes(result.log.text().encode("utf-8"))
    best = min(a.best_val for a in result.log.arms)
    print(f"wrote {args.out} (chosen lr {result.log.chosen_lr:g}, best val {best:.6f}, log {log_path})")
    return 0


def cmd_predict(args) -> int:
    store, config, model_kind = load_checkpoint(args.checkpoint)
    case = load_bundle(args.case)
    graph = prepare_case(case, config, prompt_text="")[0]
    embedding, warning = resolve_prompt_embedding(
        args.prompt_text, config.prompt_width, os.environ.get(EMBED_URL_ENV) or None
    )
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    graph = attach_prompt_embedding(graph, embedding.vector)
    if model_kind == "dose_gnn":
        predicted = predict_doses(graph, store, config)
    else:
        predicted = predict_mlp(graph, store)
    out = Path(args.out) if args.out else Path(args.case).with_suffix(".pred")
    header = {
        "kind": "prediction",
        "case_id": case.case_id,
        "model": model_kind,
        "prompt_text": args.prompt_text,
        "dose_shape": list(case.dose_geom.shape),
    }
    write_container(out, PREDICTION_MAGIC, header, [("predicted", predicted)])
    message = f"wrote {out}"
    if graph.targets is not None:
        message += f" (mse {mse_loss([predicted], [graph.targets]):.6f})"
    print(message)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import CrossValidationResult, FoldReport, _summarize_structures

    store, config, model_kind = load_checkpoint(args.checkpoint)
    cases = [c for c in _load_cases(args.data) if c.has_ground_truth()]
    if not cases:
        raise MetricsError(f"no cases with ground truth under {args.data}")
    evaluations = []
    predictions = []
    targets = []
    first_curves = None
    for case in cases:
        graph, masks = prepare_case(case, config)
        if model_kind == "dose_gnn":
            predicted = predict_doses(graph, store, config)
        else:
            predicted = predict_mlp(graph, store)
        predictions.append(predicted)
        targets.append(graph.targets)
        evaluations.append(evaluate_case(case, graph, masks, predicted))
        if first_curves is None:
            first_curves = case_curves(case, masks, predicted.reshape(case.dose_geom.shape))
    overall = mse_loss(predictions, targets)
    # Single pseudo-fold: evaluate reuses the cross-validation report layout.
    fold = FoldReport(
        fold=0,
        test_cases=tuple(c.case_id for c in cases),
        mse=overall,
        chosen_lr=0.0,
        epochs_run=0,
        cases=tuple(evaluations),
    )
    result = CrossValidationResult(
        model_kind=model_kind,
        folds=(fold,),
        mean_mse=overall,
        sd_mse=0.0,
        structures=_summarize_structures(evaluations),
    )
    written = emit_report(result, first_curves, args.report_dir)
    print(f"evaluated {len(cases)} cases, mse {overall:.6f}; wrote {len(written)} files to {args.report_dir}")
    return 0


def cmd_cv(args) -> int:
    config = _load_config(args.config, args.seed)
    cases = _load_cases(args.data)
    model_kind = "dose_gnn" if args.model == "gnn" else "mlp_baseline"
    result = cross_validate(cases, config, k=args.k, model_kind=model_kind)
    # Curves for the report come from the first tested case of the first fold.
    first = result.folds[0].cases[0]
    case = next(c for c in cases if c.case_id == first.case_id)
    graph, masks = prepare_case(case, config)
    curves = case_curves(case, masks, first.predicted.reshape(case.dose_geom.shape))
    written = emit_report(result, curves, args.report_dir)
    print(
        f"cv ({args.k} folds, {result.model_kind}): mse {result.mean_mse:.6f} +- {result.sd_mse:.6f}; "
        f"wrote {len(written)} files to {args.report_dir}"
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    file_config = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_config = json.load(fh)
    checkpoint = args.checkpoint or file_config.get("checkpoint")
    if not checkpoint:
        raise ModelError("serve needs --checkpoint or a config file with a 'checkpoint' entry")
    data_dir = args.data or file_config.get("data")
    if not data_dir:
        raise ModelError("serve needs --data or a config file with a 'data' entry")
    addr = args.addr or file_config.get("addr", "127.0.0.1:8080")
    host, _, port_text = addr.partition(":")
    port = int(port_text) if port_text else 8080
    embed_url = args.embed_url or file_config.get("embed_url") or os.environ.get(EMBED_URL_ENV) or None
    app = create_app(
        checkpoint,
        data_dir,
        embed_url=embed_url,
        journal_path=args.journal or file_config.get("journal"),
        frontend_dir=args.frontend or file_config.get("frontend"),
    )
    uvicorn.run(app, host=host or "127.0.0.1", port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dosegraph", description="dose prediction on image-dose graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="generate synthetic case bundles")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--boost-fraction", type=float, default=0.0)
    p.add_argument("--image-shape", help="nx,ny,nz (default 16,16,8)")
    p.add_argument("--dose-shape", help="nx,ny,nz (default 8,8,4)")
    p.add_argument("--image-resolution", type=float)
    p.add_argument("--dose-resolution", type=float)
    p.add_argument("--noise-sd", type=float)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("convert", help="segment structures and extract pixel features")
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("build-graph", help="construct and export the image-dose graph")
    p.add_argument("--case", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train on a directory of case bundles")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=["gnn", "mlp"], default="gnn")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict dose for one case")
    p.add_argument("--case", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt-text", default="")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--model", choices=["gnn", "mlp"], default="gnn")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--addr", help="host:port (default 127.0.0.1:8080)")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--config", help="JSON config file (addr, checkpoint, data, embed_url, journal, frontend)")
    p.add_argument("--embed-url")
    p.add_argument("--journal")
    p.add_argument("--frontend", help="directory of static UI files to serve")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
