"""Dose prediction models and the training protocol.

The graph network embeds image nodes with the windowed attention encoder,
dose and prompt nodes with linear projections, runs T rounds of neighborhood
message passing, and reads the per-node dose off a linear head. A plain MLP
over raw dose-node features serves as the baseline. Training sweeps a fixed
learning-rate grid with early stopping on a held-out validation split and
keeps the arm with the best validation loss.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    AdamState,
    AutodiffError,
    Tape,
    Tensor,
    adam_step,
    add,
    build_aggregate_operator,
    concat,
    gather_rows,
    matmul,
    mul,
    neighbor_aggregate,
    parameter,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sub,
    zero_grads,
)
from .bundles import CaseBundle
from .container import read_container, write_container
from .conversion import NUM_CHANNELS, extract_pixel_features, segment_structures
from .encoders import (
    AttentionParams,
    WindowConfig,
    encode_prompt_hashed,
    encode_windows,
    window_partition,
)
from .graph import DOSE_FEATURE_WIDTH, ImageDoseGraph, attach_prompt_embedding, build_graph

CHECKPOINT_MAGIC = b"DGPARAMS"
MLP_HIDDEN_WIDTH = 64

# Independent rng streams for init, the train/val split, and dropout masks.
_INIT_STREAM = 0x1417
_SPLIT_STREAM = 0x5714
_DROPOUT_STREAM = 0xD407


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DoseGnnConfig:
    """Architecture and training settings shared by the GNN and the baseline."""

    hidden_width: int = 32
    message_passes: int = 3
    aggregation: str = "mean"
    ffn_hidden: int = 64
    dropout_p: float = 0.1
    window_height: int = 8
    window_width: int = 8
    prompt_width: int = 64
    overlap_threshold: float = 0.3
    learning_rates: tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    patience: int = 10
    max_epochs: int = 200
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "learning_rates", tuple(float(lr) for lr in self.learning_rates))
        checks = [
            (self.hidden_width >= 2, "hidden_width must be >= 2"),
            (self.message_passes >= 1, "message_passes must be >= 1"),
            (self.aggregation in ("mean", "sum", "max"), f"unknown aggregation {self.aggregation!r}"),
            (self.ffn_hidden >= 1, "ffn_hidden must be >= 1"),
            (0.0 <= self.dropout_p < 1.0, "dropout_p must be in [0, 1)"),
            (self.window_height >= 1 and self.window_width >= 1, "window dims must be >= 1"),
            (self.prompt_width >= 1, "prompt_width must be >= 1"),
            (0.0 < self.overlap_threshold <= 1.0, "overlap_threshold must be in (0, 1]"),
            (len(self.learning_rates) > 0, "learning_rates must be non-empty"),
            (all(lr > 0.0 for lr in self.learning_rates), "learning rates must be positive"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (0.0 < self.val_fraction < 1.0, "val_fraction must be in (0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ModelError(message)

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.window_height, self.window_width)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["learning_rates"] = list(self.learning_rates)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> DoseGnnConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ModelError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


class ParameterStore:
    """Named trainable tensors in a fixed order."""

    def __init__(self, entries: Sequence[tuple[str, Tensor]]):
        self._tensors: dict[str, Tensor] = {}
        for name, tensor in entries:
            if name in self._tensors:
                raise ModelError(f"duplicate parameter name {name!r}")
            self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ModelError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self._tensors.values()]

    def restore(self, blobs: Sequence[np.ndarray]) -> None:
        if len(blobs) != len(self._tensors):
            raise ModelError(f"expected {len(self._tensors)} arrays, got {len(blobs)}")
        for tensor, blob in zip(self._tensors.values(), blobs):
            if blob.shape != tensor.shape:
                raise ModelError(f"shape mismatch restoring parameters: {blob.shape} vs {tensor.shape}")
            tensor.data[...] = blob


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gnn_parameters(config: DoseGnnConfig) -> ParameterStore:
    """Fresh GNN parameters; weights uniform within +-1/sqrt(fan_in), seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([_INIT_STREAM, config.seed]))
    d = config.hidden_width
    entries: list[tuple[str, Tensor]] = []

    def weight(name: str, fan_in: int, shape: tuple[int, ...]) -> None:
        entries.append((name, parameter(_uniform(rng, fan_in, shape))))

    def const(name: str, shape: tuple[int, ...], value: float) -> None:
        entries.append((name, parameter(np.full(shape, value))))

    weight("img_proj_w", NUM_CHANNELS, (NUM_CHANNELS, d))
    const("img_proj_b", (d,), 0.0)
    weight("enc_wq", d, (d, d))
    weight("enc_wk", d, (d, d))
    weight("enc_wv", d, (d, d))
    weight("enc_fc1_w", d, (d, config.ffn_hidden))
    const("enc_fc1_b", (config.ffn_hidden,), 0.0)
    weight("enc_fc2_w", config.ffn_hidden, (config.ffn_hidden, d))
    const("enc_fc2_b", (d,), 0.0)
    const("enc_ln1_gain", (d,), 1.0)
    const("enc_ln1_bias", (d,), 0.0)
    const("enc_ln2_gain", (d,), 1.0)
    const("enc_ln2_bias", (d,), 0.0)
    weight("dose_proj_w", DOSE_FEATURE_WIDTH, (DOSE_FEATURE_WIDTH, d))
    const("dose_proj_b", (d,), 0.0)
    weight("prompt_proj_w", config.prompt_width, (config.prompt_width, d))
    const("prompt_proj_b", (d,), 0.0)
    for t in range(config.message_passes):
        weight(f"mp{t}_w", 2 * d, (2 * d, d))
        const(f"mp{t}_b", (d,), 0.0)
    weight("head_w", d, (d, 1))
    const("head_b", (1,), 0.0)
    return ParameterStore(entries)


def init_mlp_parameters(config: DoseGnnConfig) -> ParameterStore:
    """Baseline MLP over [raw dose features, averaged pixel context]."""
    rng = np.random.default_rng(np.random.SeedSequence([_INIT_STREAM, config.seed]))
    d_in = DOSE_FEATURE_WIDTH + NUM_CHANNELS
    entries: list[tuple[str, Tensor]] = []
    entries.append(("mlp_fc1_w", parameter(_uniform(rng, d_in, (d_in, MLP_HIDDEN_WIDTH)))))
    entries.append(("mlp_fc1_b", parameter(np.zeros(MLP_HIDDEN_WIDTH))))
    entries.append(("mlp_fc2_w", parameter(_uniform(rng, MLP_HIDDEN_WIDTH, (MLP_HIDDEN_WIDTH, MLP_HIDDEN_WIDTH)))))
    entries.append(("mlp_fc2_b", parameter(np.zeros(MLP_HIDDEN_WIDTH))))
    entries.append(("mlp_out_w", parameter(_uniform(rng, MLP_HIDDEN_WIDTH, (MLP_HIDDEN_WIDTH, 1)))))
    entries.append(("mlp_out_b", parameter(np.zeros(1))))
    return ParameterStore(entries)


def _attention_params(store: ParameterStore, config: DoseGnnConfig) -> AttentionParams:
    return AttentionParams(
        w_q=store["enc_wq"],
        w_k=store["enc_wk"],
        w_v=store["enc_wv"],
        fc1_w=store["enc_fc1_w"],
        fc1_b=store["enc_fc1_b"],
        fc2_w=store["enc_fc2_w"],
        fc2_b=store["enc_fc2_b"],
        ln1_gain=store["enc_ln1_gain"],
        ln1_bias=store["enc_ln1_bias"],
        ln2_gain=store["enc_ln2_gain"],
        ln2_bias=store["enc_ln2_bias"],
        dropout_p=config.dropout_p,
    )


def _forward_cache(graph: ImageDoseGraph, config: DoseGnnConfig) -> dict:
    # Window batches and aggregation operators depend only on the graph and
    # config geometry, so they are built once per graph and reused.
    cache = getattr(graph, "_forward_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(graph, "_forward_cache", cache)
    key = (config.window_height, config.window_width, config.aggregation)
    entry = cache.get(key)
    if entry is None:
        windows = window_partition(graph.image_features, graph.image_shape, config.window)
        src, dst = graph.message_endpoints()
        operator = None
        if config.aggregation in ("mean", "sum"):
            operator = build_aggregate_operator(src, dst, graph.num_nodes, config.aggregation)
        entry = {"windows": windows, "src": src, "dst": dst, "operator": operator}
        cache[key] = entry
    return entry


def forward_dose_gnn(
    graph: ImageDoseGraph,
    store: ParameterStore,
    config: DoseGnnConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predicted dose per dose node, in lexicographic grid order."""
    if graph.prompt_embedding.shape[0] != config.prompt_width:
        raise ModelError(
            f"graph prompt width {graph.prompt_embedding.shape[0]} != config prompt width {config.prompt_width}"
        )
    entry = _forward_cache(graph, config)
    img = encode_windows(
        entry["windows"], store["img_proj_w"], store["img_proj_b"], _attention_params(store, config), mode, rng
    )
    dose_h = relu(add(matmul(Tensor(graph.dose_features), store["dose_proj_w"]), store["dose_proj_b"]))
    prompt_h = relu(
        add(matmul(Tensor(graph.prompt_embedding[None, :]), store["prompt_proj_w"]), store["prompt_proj_b"])
    )
    h = concat([img, dose_h, prompt_h], axis=0)
    for t in range(config.message_passes):
        agg = neighbor_aggregate(h, entry["src"], entry["dst"], graph.num_nodes, config.aggregation, entry["operator"])
        h = relu(add(matmul(concat([h, agg], axis=1), store[f"mp{t}_w"]), store[f"mp{t}_b"]))
    rows = gather_rows(h, graph.dose_node_ids())
    out = add(matmul(rows, store["head_w"]), store["head_b"])
    return reshape(out, (graph.num_dose_nodes,))


def forward_mlp(graph: ImageDoseGraph, store: ParameterStore) -> Tensor:
    x = Tensor(np.concatenate([graph.dose_features, graph.dose_context], axis=1))
    h = relu(add(matmul(x, store["mlp_fc1_w"]), store["mlp_fc1_b"]))
    h = relu(add(matmul(h, store["mlp_fc2_w"]), store["mlp_fc2_b"]))
    out = add(matmul(h, store["mlp_out_w"]), store["mlp_out_b"])
    return reshape(out, (graph.num_dose_nodes,))


def predict_doses(graph: ImageDoseGraph, store: ParameterStore, config: DoseGnnConfig) -> np.ndarray:
    """Eval-mode dose prediction as a plain array."""
    return forward_dose_gnn(graph, store, config, mode="eval").data.copy()


def predict_mlp(graph: ImageDoseGraph, store: ParameterStore) -> np.ndarray:
    return forward_mlp(graph, store).data.copy()


def readout(h: Tensor, mode: str = "mean") -> Tensor:
    """Columnwise graph-level summary of node embeddings."""
    if mode == "mean":
        return reduce_mean(h, axis=0)
    if mode == "sum":
        return reduce_sum(h, axis=0)
    if mode == "max":
        return reduce_max(h, axis=0)
    raise ModelError(f"unknown readout mode {mode!r}")


def mse_loss(predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Total squared error over every dose node, divided by the total node count."""
    if len(predictions) != len(targets):
        raise ModelError(f"{len(predictions)} predictions vs {len(targets)} targets")
    if not predictions:
        raise ModelError("mse_loss needs at least one case")
    sse = 0.0
    count = 0
    for pred, target in zip(predictions, targets):
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ModelError(f"prediction shape {pred.shape} != target shape {target.shape}")
        sse += float(np.sum((pred - target) ** 2))
        count += pred.size
    return sse / count


def _case_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    diff = sub(pred, Tensor(targets))
    return scale(reduce_sum(mul(diff, diff)), 1.0 / targets.size)


def prepare_case(case: CaseBundle, config: DoseGnnConfig, prompt_text: str | None = None):
    """Segmentation, feature extraction, graph build, prompt attachment.

    Returns (graph, masks); the masks are reused by structure-level metrics.
    When prompt_text is None the case's own prescription text is encoded.
    """
    masks = segment_structures(case)
    features = extract_pixel_features(masks, case.image_geom)
    graph = build_graph(case, features, masks, config.overlap_threshold, config.prompt_width)
    text = case.prescription_text if prompt_text is None else prompt_text
    if text:
        graph = attach_prompt_embedding(graph, encode_prompt_hashed(text, config.prompt_width).vector)
    return graph, masks


def graph_for_case(case: CaseBundle, config: DoseGnnConfig, prompt_text: str | None = None) -> ImageDoseGraph:
    return prepare_case(case, config, prompt_text)[0]


@dataclass(frozen=True)
class EpochRecord:
    lr: float
    epoch: int
    train_loss: float
    val_loss: float
    improved: bool


@dataclass(frozen=True)
class ArmRecord:
    lr: float
    best_val: float
    best_epoch: int
    epochs_run: int
    stop_reason: str  # patience | max_epochs | diverged


@dataclass(frozen=True)
class TrainLog:
    """Full record of one training run, enough to audit the protocol."""

    seed: int
    learning_rates: tuple[float, ...]
    train_cases: tuple[str, ...]
    val_cases: tuple[str, ...]
    epochs: tuple[EpochRecord, ...]
    arms: tuple[ArmRecord, ...]
    chosen_lr: float

    def lines(self) -> list[str]:
        out = [
            f"seed={self.seed}",
            "lr_grid=" + ",".join(f"{lr:g}" for lr in self.learning_rates),
            f"train_cases={','.join(self.train_cases)}",
            f"val_cases={','.join(self.val_cases)}",
        ]
        for e in self.epochs:
            mark = " *" if e.improved else ""
            out.append(f"lr={e.lr:g} epoch={e.epoch} train={e.train_loss:.9f} val={e.val_loss:.9f}{mark}")
        for a in self.arms:
            out.append(
                f"arm lr={a.lr:g} best_val={a.best_val:.9f} best_epoch={a.best_epoch} "
                f"epochs_run={a.epochs_run} stop={a.stop_reason}"
            )
        out.append(f"chosen_lr={self.chosen_lr:g}")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


@dataclass(frozen=True)
class TrainResult:
    params: ParameterStore
    config: DoseGnnConfig
    model_kind: str  # dose_gnn | mlp_baseline
    log: TrainLog


def split_dataset(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split; at least one case on each side."""
    if n < 2:
        raise ModelError(f"need at least 2 cases to split, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([_SPLIT_STREAM, seed]))
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return perm[n_val:], perm[:n_val]


ForwardFn = Callable[[ImageDoseGraph, ParameterStore, str, "np.random.Generator | None"], Tensor]


def _train(
    graphs: Sequence[ImageDoseGraph],
    config: DoseGnnConfig,
    model_kind: str,
    init_fn: Callable[[], ParameterStore],
    forward_fn: ForwardFn,
) -> TrainResult:
    for g in graphs:
        if g.targets is None:
            raise ModelError(f"case {g.case_id!r} has no ground-truth dose")
    train_idx, val_idx = split_dataset(len(graphs), config.val_fraction, config.seed)
    train_graphs = [graphs[i] for i in train_idx]
    val_graphs = [graphs[i] for i in val_idx]
    val_targets = [g.targets for g in val_graphs]

    epochs: list[EpochRecord] = []
    arms: list[ArmRecord] = []
    best_overall = math.inf
    best_blobs: list[np.ndarray] | None = None
    chosen_lr = config.learning_rates[0]

    for arm_index, lr in enumerate(config.learning_rates):
        store = init_fn()
        state = AdamState(store.tensors())
        drop_rng = np.random.default_rng(np.random.SeedSequence([_DROPOUT_STREAM, config.seed, arm_index]))
        best_val = math.inf
        best_epoch = 0
        arm_blobs: list[np.ndarray] | None = None
        stall = 0
        epochs_run = 0
        stop_reason = "max_epochs"

        for epoch in range(1, config.max_epochs + 1):
            sse = 0.0
            count = 0
            diverged = False
            for g in train_graphs:
                with Tape() as tape:
                    pred = forward_fn(g, store, "train", drop_rng)
                    loss = _case_loss(pred, g.targets)
                    value = loss.item()
                    if math.isfinite(value):
                        tape.backward(loss)
                if not math.isfinite(value):
                    diverged = True
                    break
                try:
                    adam_step(store.tensors(), state, lr)
                except AutodiffError:
                    diverged = True
                    break
                zero_grads(store.tensors())
                sse += value * g.targets.size
                count += g.targets.size
            epochs_run = epoch
            if diverged:
                stop_reason = "diverged"
                break
            val_preds = [forward_fn(g, store, "eval", None).data for g in val_graphs]
            val_loss = mse_loss(val_preds, val_targets)
            improved = val_loss < best_val
            if improved:
                best_val = val_loss
                best_epoch = epoch
                arm_blobs = store.snapshot()
                stall = 0
            else:
                stall += 1
            epochs.append(EpochRecord(lr, epoch, sse / count, val_loss, improved))
            if stall >= config.patience:
                stop_reason = "patience"
                break

        arms.append(ArmRecord(lr, best_val, best_epoch, epochs_run, stop_reason))
        if arm_blobs is not None and best_val < best_overall:
            best_overall = best_val
            best_blobs = arm_blobs
            chosen_lr = lr

    if best_blobs is None:
        raise ModelError("training diverged before completing an epoch at every learning rate")

    final = init_fn()
    final.restore(best_blobs)
    log = TrainLog(
        seed=config.seed,
        learning_rates=config.learning_rates,
        train_cases=tuple(graphs[i].case_id for i in train_idx),
        val_cases=tuple(graphs[i].case_id for i in val_idx),
        epochs=tuple(epochs),
        arms=tuple(arms),
        chosen_lr=chosen_lr,
    )
    return TrainResult(params=final, config=config, model_kind=model_kind, log=log)


def train_dose_gnn(graphs: Sequence[ImageDoseGraph], config: DoseGnnConfig) -> TrainResult:
    """Sweep the learning-rate grid and return the best early-stopped parameters."""

    def forward(g: ImageDoseGraph, store: ParameterStore, mode: str, rng) -> Tensor:
        return forward_dose_gnn(g, store, config, mode, rng)

    return _train(graphs, config, "dose_gnn", lambda: init_gnn_parameters(config), forward)


def train_mlp_baseline(graphs: Sequence[ImageDoseGraph], config: DoseGnnConfig) -> TrainResult:
    """Same protocol as the GNN, with the MLP forward pass."""

    def forward(g: ImageDoseGraph, store: ParameterStore, mode: str, rng) -> Tensor:
        return forward_mlp(g, store)

    return _train(graphs, config, "mlp_baseline", lambda: init_mlp_parameters(config), forward)


def save_checkpoint(path, result: TrainResult) -> None:
    """Write parameters plus config; identical runs produce identical bytes."""
    header = {
        "kind": "parameters",
        "model": result.model_kind,
        "config": result.config.to_dict(),
    }
    write_container(path, CHECKPOINT_MAGIC, header, [(n, t.data) for n, t in result.params.items()])


def load_checkpoint(path) -> tuple[ParameterStore, DoseGnnConfig, str]:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "parameters":
        raise ModelError(f"{path}: not a parameter checkpoint")
    model_kind = header.get("model")
    if model_kind not in ("dose_gnn", "mlp_baseline"):
        raise ModelError(f"{path}: unknown model kind {model_kind!r}")
    config = DoseGnnConfig.from_dict(header["config"])
    entries = [(e["name"], parameter(arrays[e["name"]])) for e in header["tensors"]]
    store = ParameterStore(entries)
    reference = init_gnn_parameters(config) if model_kind == "dose_gnn" else init_mlp_parameters(config)
    if store.names() != reference.names():
        raise ModelError(f"{path}: parameter names do not match the stored config")
    for name, tensor in store.items():
        if tensor.shape != reference[name].shape:
            raise ModelError(f"{path}: parameter {name!r} has shape {tensor.shape}, expected {reference[name].shape}")
    return store, config, model_kind
