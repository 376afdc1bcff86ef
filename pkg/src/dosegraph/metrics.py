"""Evaluation: structure dose metrics, CDVH curves, cross-validation, reports.

Structure-level quantities are computed on the dose grid with overlap-volume
weights, so partially covered boundary voxels count in proportion to how much
of the structure they actually hold.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bundles import NUM_STRUCTURES, STRUCTURE_NAMES, CaseBundle, GridGeometry
from .conversion import StructureMasks
from .geometry import grid_bounds
from .graph import ImageDoseGraph, _axis_overlap_matrix
from .model import (
    DoseGnnConfig,
    mse_loss,
    predict_doses,
    predict_mlp,
    prepare_case,
    train_dose_gnn,
    train_mlp_baseline,
)

CDVH_EDGES = 121  # 0 to 120% of prescription in 1% steps

_CV_STREAM = 0xCF01


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class DoseSample:
    """Doses seen by one structure: values with overlap-volume weights."""

    values: np.ndarray  # (m,) Gy
    weights: np.ndarray  # (m,) mm^3, all > 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if values.ndim != 1 or values.shape != weights.shape:
            raise MetricsError(f"values {values.shape} and weights {weights.shape} must be matching vectors")
        values.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def dose_on_structure(
    dose: np.ndarray,
    dose_geom: GridGeometry,
    mask: np.ndarray,
    image_geom: GridGeometry,
) -> DoseSample:
    """Dose values on the structure, weighted by overlap volume.

    For each dose voxel the weight is its total overlap volume with the
    structure's image voxels; zero-weight voxels are excluded. Terms are
    accumulated in lexicographic mask order so the result matches a scalar
    all-pairs reference bit for bit.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image_geom.shape:
        raise MetricsError(f"mask shape {mask.shape} does not match image grid {image_geom.shape}")
    dose = np.asarray(dose, dtype=np.float64)
    if dose.shape != dose_geom.shape:
        raise MetricsError(f"dose shape {dose.shape} does not match dose grid {dose_geom.shape}")
    if not mask.any():
        raise MetricsError("empty structure mask")
    ix, iy, iz = grid_bounds(image_geom)
    dx, dy, dz = grid_bounds(dose_geom)
    lx = _axis_overlap_matrix(dx, ix)
    ly = _axis_overlap_matrix(dy, iy)
    lz = _axis_overlap_matrix(dz, iz)
    i, j, k = np.argwhere(mask).T
    terms = (lx[:, None, None, i] * ly[None, :, None, j]) * lz[None, None, :, k]
    weights = terms.sum(axis=-1).ravel()
    keep = weights > 0.0
    return DoseSample(dose.ravel()[keep], weights[keep])


@dataclass(frozen=True)
class StructureMetrics:
    """Max and mean dose agreement for one structure."""

    slot: int
    d_max_true: float
    d_mean_true: float
    d_max_pred: float
    d_mean_pred: float
    norm_dmax_err: float  # |pred - true| / prescription
    norm_dmean_err: float

    @property
    def name(self) -> str:
        return STRUCTURE_NAMES[self.slot]


def structure_metrics(pred: DoseSample, true: DoseSample, prescription_dose: float, slot: int) -> StructureMetrics:
    """Dmax/Dmean with absolute errors normalized by the prescription dose."""
    if prescription_dose <= 0.0:
        raise MetricsError(f"prescription dose must be positive, got {prescription_dose}")
    if pred.size == 0 or true.size == 0:
        raise MetricsError("structure dose samples must be non-empty")
    if not 0 <= slot < NUM_STRUCTURES:
        raise MetricsError(f"structure slot out of range: {slot}")

    def _stats(sample: DoseSample) -> tuple[float, float]:
        mean = float((sample.values * sample.weights).sum() / sample.weights.sum())
        return float(sample.values.max()), mean

    d_max_pred, d_mean_pred = _stats(pred)
    d_max_true, d_mean_true = _stats(true)
    return StructureMetrics(
        slot=slot,
        d_max_true=d_max_true,
        d_mean_true=d_mean_true,
        d_max_pred=d_max_pred,
        d_mean_pred=d_mean_pred,
        norm_dmax_err=abs(d_max_pred - d_max_true) / prescription_dose,
        norm_dmean_err=abs(d_mean_pred - d_mean_true) / prescription_dose,
    )


@dataclass(frozen=True)
class CdvhCurve:
    """Fraction of structure volume receiving at least each edge dose."""

    slot: int
    edges: np.ndarray  # (121,) Gy, 0 to 1.2x prescription
    values: np.ndarray  # (121,) fractions

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if edges.shape != (CDVH_EDGES,) or values.shape != (CDVH_EDGES,):
            raise MetricsError(f"curve arrays must have {CDVH_EDGES} entries")
        if not (np.all(np.isfinite(edges)) and np.all(np.isfinite(values))):
            raise MetricsError("curve entries must be finite")
        edges.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "values", values)

    @property
    def name(self) -> str:
        return STRUCTURE_NAMES[self.slot]


def cdvh(sample: DoseSample, prescription_dose: float, slot: int) -> CdvhCurve:
    """Cumulative histogram on 121 edges spanning 0 to 120% of prescription."""
    if prescription_dose <= 0.0:
        raise MetricsError(f"prescription dose must be positive, got {prescription_dose}")
    if sample.size == 0:
        raise MetricsError("empty structure dose sample")
    edges = prescription_dose * (np.arange(CDVH_EDGES, dtype=np.float64) / 100.0)
    # Bucket voxels by the number of edges they cover, then suffix-sum the
    # bucket weights. Suffix sums of non-negative terms cannot decrease, so
    # the curve is non-increasing, stays within [0, 1], and equals exactly
    # 1.0 at dose 0 whenever every dose is non-negative.
    covered = np.searchsorted(edges, sample.values, side="right")
    buckets = np.bincount(covered, weights=sample.weights, minlength=CDVH_EDGES + 1)
    suffix = np.cumsum(buckets[::-1])[::-1]
    values = suffix[1:] / suffix[0]
    return CdvhCurve(slot=slot, edges=edges, values=values)


@dataclass(frozen=True)
class CurvePair:
    """Predicted CDVH for one structure, with the true curve when known."""

    slot: int
    prescription_dose: float
    predicted: CdvhCurve
    truth: CdvhCurve | None = None

    @property
    def name(self) -> str:
        return STRUCTURE_NAMES[self.slot]


def case_curves(
    case: CaseBundle,
    masks: StructureMasks,
    predicted: np.ndarray,
    include_truth: bool = True,
) -> list[CurvePair]:
    """Per-structure CDVH pairs for one case, ascending slot order.

    Structures with an empty mask or no overlap with the dose grid are
    skipped. `predicted` is a dose tensor on the case's dose grid.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != case.dose_geom.shape:
        raise MetricsError(f"predicted dose shape {predicted.shape} != dose grid {case.dose_geom.shape}")
    with_truth = include_truth and case.has_ground_truth()
    pairs: list[CurvePair] = []
    for slot in range(NUM_STRUCTURES):
        if not masks.masks[slot].any():
            continue
        pred_sample = dose_on_structure(predicted, case.dose_geom, masks.masks[slot], case.image_geom)
        if pred_sample.size == 0:
            continue
        predicted_curve = cdvh(pred_sample, case.prescription_dose, slot)
        truth_curve = None
        if with_truth:
            true_sample = dose_on_structure(case.dose, case.dose_geom, masks.masks[slot], case.image_geom)
            truth_curve = cdvh(true_sample, case.prescription_dose, slot)
        pairs.append(CurvePair(slot, case.prescription_dose, predicted_curve, truth_curve))
    return pairs


@dataclass(frozen=True, eq=False)
class CaseEvaluation:
    case_id: str
    mse: float
    metrics: tuple[StructureMetrics, ...]
    predicted: np.ndarray  # (num dose voxels,) lexicographic


@dataclass(frozen=True)
class FoldReport:
    fold: int
    test_cases: tuple[str, ...]
    mse: float
    chosen_lr: float
    epochs_run: int
    cases: tuple[CaseEvaluation, ...]


@dataclass(frozen=True)
class StructureSummary:
    slot: int
    case_count: int
    mean_dmax_err: float
    sd_dmax_err: float
    mean_dmean_err: float
    sd_dmean_err: float

    @property
    def name(self) -> str:
        return STRUCTURE_NAMES[self.slot]


@dataclass(frozen=True)
class CrossValidationResult:
    model_kind: str
    folds: tuple[FoldReport, ...]
    mean_mse: float
    sd_mse: float
    structures: tuple[StructureSummary, ...]


def fold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle cut into k contiguous folds (disjoint, covering all)."""
    if not 2 <= k <= n:
        raise MetricsError(f"need 2 <= k <= case count, got k={k} with {n} cases")
    rng = np.random.default_rng(np.random.SeedSequence([_CV_STREAM, seed]))
    return np.array_split(rng.permutation(n), k)


def evaluate_case(
    case: CaseBundle,
    graph: ImageDoseGraph,
    masks: StructureMasks,
    predicted: np.ndarray,
) -> CaseEvaluation:
    """MSE plus per-structure metrics for one case with ground truth."""
    if graph.targets is None:
        raise MetricsError(f"case {case.case_id!r} has no ground-truth dose")
    mse = mse_loss([predicted], [graph.targets])
    pred_grid = predicted.reshape(case.dose_geom.shape)
    collected: list[StructureMetrics] = []
    for slot in range(NUM_STRUCTURES):
        if not masks.masks[slot].any():
            continue
        pred_sample = dose_on_structure(pred_grid, case.dose_geom, masks.masks[slot], case.image_geom)
        if pred_sample.size == 0:
            continue
        true_sample = dose_on_structure(case.dose, case.dose_geom, masks.masks[slot], case.image_geom)
        collected.append(structure_metrics(pred_sample, true_sample, case.prescription_dose, slot))
    return CaseEvaluation(
        case_id=case.case_id, mse=mse, metrics=tuple(collected), predicted=np.asarray(predicted, dtype=np.float64)
    )


def _sample_sd(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=1))


def _summarize_structures(evaluations: Sequence[CaseEvaluation]) -> tuple[StructureSummary, ...]:
    by_slot: dict[int, list[StructureMetrics]] = {}
    for evaluation in evaluations:
        for m in evaluation.metrics:
            by_slot.setdefault(m.slot, []).append(m)
    out = []
    for slot in sorted(by_slot):
        ms = by_slot[slot]
        dmax = [m.norm_dmax_err for m in ms]
        dmean = [m.norm_dmean_err for m in ms]
        out.append(
            StructureSummary(
                slot=slot,
                case_count=len(ms),
                mean_dmax_err=float(np.mean(dmax)),
                sd_dmax_err=_sample_sd(dmax),
                mean_dmean_err=float(np.mean(dmean)),
                sd_dmean_err=_sample_sd(dmean),
            )
        )
    return tuple(out)


def cross_validate(
    cases: Sequence[CaseBundle],
    config: DoseGnnConfig,
    k: int = 5,
    model_kind: str = "dose_gnn",
) -> CrossValidationResult:
    """k-fold cross-validation: train on k-1 folds, evaluate the held-out one.

    Every case is tested exactly once. The summary reports fold MSE as
    mean +- sample sd and pools structure metrics across all tested cases.
    """
    if model_kind not in ("dose_gnn", "mlp_baseline"):
        raise MetricsError(f"unknown model kind {model_kind!r}")
    for case in cases:
        if not case.has_ground_truth():
            raise MetricsError(f"case {case.case_id!r} has no ground-truth dose")
    folds = fold_indices(len(cases), k, config.seed)
    prepared = [prepare_case(case, config) for case in cases]
    graphs = [graph for graph, _ in prepared]

    reports: list[FoldReport] = []
    for fold_number, test_idx in enumerate(folds):
        test_set = set(int(i) for i in test_idx)
        train_graphs = [graphs[i] for i in range(len(cases)) if i not in test_set]
        if model_kind == "dose_gnn":
            result = train_dose_gnn(train_graphs, config)
        else:
            result = train_mlp_baseline(train_graphs, config)
        evaluations = []
        predictions = []
        targets = []
        for i in test_idx:
            i = int(i)
            if model_kind == "dose_gnn":
                pred = predict_doses(graphs[i], result.params, config)
            else:
                pred = predict_mlp(graphs[i], result.params)
            predictions.append(pred)
            targets.append(graphs[i].targets)
            evaluations.append(evaluate_case(cases[i], graphs[i], prepared[i][1], pred))
        chosen_arm = next(a for a in result.log.arms if a.lr == result.log.chosen_lr)
        reports.append(
            FoldReport(
                fold=fold_number,
                test_cases=tuple(cases[int(i)].case_id for i in test_idx),
                mse=mse_loss(predictions, targets),
                chosen_lr=result.log.chosen_lr,
                epochs_run=chosen_arm.epochs_run,
                cases=tuple(evaluations),
            )
        )

    fold_mses = [r.mse for r in reports]
    all_evaluations = [e for r in reports for e in r.cases]
    return CrossValidationResult(
        model_kind=model_kind,
        folds=tuple(reports),
        mean_mse=float(np.mean(fold_mses)),
        sd_mse=_sample_sd(fold_mses),
        structures=_summarize_structures(all_evaluations),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def _fold_structure_means(report: FoldReport, slot: int) -> tuple[str, str]:
    dmax = [m.norm_dmax_err for e in report.cases for m in e.metrics if m.slot == slot]
    dmean = [m.norm_dmean_err for e in report.cases for m in e.metrics if m.slot == slot]
    if not dmax:
        return "", ""
    return _fmt(float(np.mean(dmax))), _fmt(float(np.mean(dmean)))


def _metrics_table(result: CrossValidationResult) -> str:
    slots = [s.slot for s in result.structures]
    header = ["fold", "model", "mse"]
    for slot in slots:
        name = STRUCTURE_NAMES[slot]
        header += [f"{name}_dmax_err", f"{name}_dmean_err"]
    lines = [",".join(header)]
    for report in result.folds:
        row = [str(report.fold), result.model_kind, _fmt(report.mse)]
        for slot in slots:
            row += list(_fold_structure_means(report, slot))
        lines.append(",".join(row))
    mean_row = ["mean", result.model_kind, _fmt(result.mean_mse)]
    sd_row = ["sd", result.model_kind, _fmt(result.sd_mse)]
    for s in result.structures:
        mean_row += [_fmt(s.mean_dmax_err), _fmt(s.mean_dmean_err)]
        sd_row += [_fmt(s.sd_dmax_err), _fmt(s.sd_dmean_err)]
    lines.append(",".join(mean_row))
    lines.append(",".join(sd_row))
    return "\n".join(lines) + "\n"


def _curve_csv(pair: CurvePair) -> str:
    lines = ["dose_gy,volume_fraction"]
    for edge, value in zip(pair.predicted.edges, pair.predicted.values):
        lines.append(f"{_fmt(edge)},{_fmt(value)}")
    return "\n".join(lines) + "\n"


_SVG_WIDTH = 640
_SVG_HEIGHT = 480
_SVG_LEFT, _SVG_RIGHT, _SVG_TOP, _SVG_BOTTOM = 70, 24, 42, 58


def _svg_points(curve: CdvhCurve, prescription: float) -> str:
    plot_w = _SVG_WIDTH - _SVG_LEFT - _SVG_RIGHT
    plot_h = _SVG_HEIGHT - _SVG_TOP - _SVG_BOTTOM
    span = 1.2 * prescription
    pts = []
    for edge, value in zip(curve.edges, curve.values):
        px = _SVG_LEFT + plot_w * (edge / span)
        py = _SVG_TOP + plot_h * (1.0 - min(max(value, 0.0), 1.0))
        pts.append(f"{px:.2f},{py:.2f}")
    return " ".join(pts)


def _curve_svg(pair: CurvePair) -> str:
    """Standalone CDVH plot: x 0-120% of prescription, y 0-100% volume."""
    plot_w = _SVG_WIDTH - _SVG_LEFT - _SVG_RIGHT
    plot_h = _SVG_HEIGHT - _SVG_TOP - _SVG_BOTTOM
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_WIDTH}" height="{_SVG_HEIGHT}" '
        f'viewBox="0 0 {_SVG_WIDTH} {_SVG_HEIGHT}" font-family="sans-serif" font-size="13">',
        f'<rect width="{_SVG_WIDTH}" height="{_SVG_HEIGHT}" fill="white"/>',
        f'<text x="{_SVG_WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="16">{pair.name} CDVH</text>',
        f'<rect x="{_SVG_LEFT}" y="{_SVG_TOP}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    for percent in range(0, 121, 20):
        px = _SVG_LEFT + plot_w * percent / 120.0
        parts.append(
            f'<line x1="{px:.2f}" y1="{_SVG_TOP + plot_h}" x2="{px:.2f}" y2="{_SVG_TOP + plot_h + 5}" stroke="#444"/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{_SVG_TOP + plot_h + 20}" text-anchor="middle">{percent}</text>'
        )
    for percent in range(0, 101, 20):
        py = _SVG_TOP + plot_h * (1.0 - percent / 100.0)
        parts.append(f'<line x1="{_SVG_LEFT - 5}" y1="{py:.2f}" x2="{_SVG_LEFT}" y2="{py:.2f}" stroke="#444"/>')
        parts.append(
            f'<text x="{_SVG_LEFT - 9}" y="{py + 4:.2f}" text-anchor="end">{percent}</text>'
        )
    parts.append(
        f'<text x="{_SVG_LEFT + plot_w / 2:.0f}" y="{_SVG_HEIGHT - 14}" text-anchor="middle">'
        "dose (% of prescription)</text>"
    )
    parts.append(
        f'<text x="18" y="{_SVG_TOP + plot_h / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {_SVG_TOP + plot_h / 2:.0f})">volume (%)</text>'
    )
    if pair.truth is not None:
        parts.append(
            f'<polyline points="{_svg_points(pair.truth, pair.prescription_dose)}" '
            'fill="none" stroke="#888888" stroke-width="2" stroke-dasharray="6 4"/>'
        )
        parts.append(f'<text x="{_SVG_WIDTH - 170}" y="{_SVG_TOP + 34}" fill="#888888">true</text>')
    parts.append(
        f'<polyline points="{_svg_points(pair.predicted, pair.prescription_dose)}" '
        'fill="none" stroke="#1f6fb2" stroke-width="2"/>'
    )
    parts.append(f'<text x="{_SVG_WIDTH - 170}" y="{_SVG_TOP + 16}" fill="#1f6fb2">predicted</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(result: CrossValidationResult, curves: Sequence[CurvePair], out_dir) -> list[Path]:
    """Write the metrics table plus per-structure curve CSVs and SVG plots.

    Pure function of its inputs: re-running on the same data reproduces every
    file byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    table_path = out / "metrics.csv"
    table_path.write_bytes(_metrics_table(result).encode("utf-8"))
    written.append(table_path)
    for pair in curves:
        csv_path = out / f"cdvh_{pair.name}.csv"
        csv_path.write_bytes(_curve_csv(pair).encode("utf-8"))
        written.append(csv_path)
        svg_path = out / f"cdvh_{pair.name}.svg"
        svg_path.write_bytes(_curve_svg(pair).encode("utf-8"))
        written.append(svg_path)
    return written
