"""Dose prediction on image-dose graphs, steerable by text prompts."""

from .bundles import (
    NUM_STRUCTURES,
    PTV_SLOT,
    STRUCTURE_NAMES,
    BundleError,
    CaseBundle,
    GridGeometry,
    list_bundles,
    load_bundle,
    save_bundle,
)
from .conversion import (
    ConversionError,
    FeatureTensor,
    StructureMasks,
    extract_pixel_features,
    ptv_centroid,
    segment_structures,
)
from .encoders import PromptEmbedding, encode_prompt_hashed, fetch_remote_embedding, resolve_prompt_embedding
from .graph import GraphError, ImageDoseGraph, attach_prompt_embedding, build_graph
from .metrics import (
    CdvhCurve,
    CrossValidationResult,
    DoseSample,
    MetricsError,
    StructureMetrics,
    case_curves,
    cdvh,
    cross_validate,
    dose_on_structure,
    emit_report,
    structure_metrics,
)
from .model import (
    DoseGnnConfig,
    ModelError,
    ParameterStore,
    TrainResult,
    graph_for_case,
    load_checkpoint,
    mse_loss,
    predict_doses,
    predict_mlp,
    prepare_case,
    save_checkpoint,
    train_dose_gnn,
    train_mlp_baseline,
)
from .phantoms import PhantomConfig, generate_phantom, generate_phantom_set
from .service import create_app

__version__ = "0.1.0"

__all__ = [
    "NUM_STRUCTURES",
    "PTV_SLOT",
    "STRUCTURE_NAMES",
    "BundleError",
    "CaseBundle",
    "GridGeometry",
    "list_bundles",
    "load_bundle",
    "save_bundle",
    "ConversionError",
    "FeatureTensor",
    "StructureMasks",
    "extract_pixel_features",
    "ptv_centroid",
    "segment_structures",
    "PromptEmbedding",
    "encode_prompt_hashed",
    "fetch_remote_embedding",
    "resolve_prompt_embedding",
    "GraphError",
    "ImageDoseGraph",
    "attach_prompt_embedding",
    "build_graph",
    "CdvhCurve",
    "CrossValidationResult",
    "DoseSample",
    "MetricsError",
    "StructureMetrics",
    "case_curves",
    "cdvh",
    "cross_validate",
    "dose_on_structure",
    "emit_report",
    "structure_metrics",
    "DoseGnnConfig",
    "ModelError",
    "ParameterStore",
    "TrainResult",
    "graph_for_case",
    "load_checkpoint",
    "mse_loss",
    "predict_doses",
    "predict_mlp",
    "prepare_case",
    "save_checkpoint",
    "train_dose_gnn",
    "train_mlp_baseline",
    "PhantomConfig",
    "generate_phantom",
    "generate_phantom_set",
    "create_app",
    "__version__",
]
