"""Initial node features: image self-attention encoder and prompt encoders.

The image encoder projects each pixel's 18-channel feature row to the model
width, runs single-head self-attention within non-overlapping per-slice 2D
windows, and applies the feed-forward block. The prompt side provides a
deterministic hashed bag-of-words embedding and an optional remote client
that falls back to hashing on any failure.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import httpx
import numpy as np

from .autodiff import (
    Tensor,
    add,
    dropout,
    gather_rows,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose_last2,
)

DEFAULT_TIMEOUT_S = 5.0


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    """Per-slice 2D window extents, in pixels."""

    height: int = 8  # along x
    width: int = 8  # along y

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise EncoderError(f"window dims must be >= 1, got {self.height}x{self.width}")


@dataclass(frozen=True)
class AttentionParams:
    """Single-head attention projections plus the feed-forward block."""

    w_q: Tensor  # (d_in, d_k)
    w_k: Tensor
    w_v: Tensor
    fc1_w: Tensor  # (d_k, hidden)
    fc1_b: Tensor
    fc2_w: Tensor  # (hidden, d_k)
    fc2_b: Tensor
    ln1_gain: Tensor  # (d_k,)
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    dropout_p: float = 0.1
    heads: int = 1  # single-head by design

    def __post_init__(self):
        if self.heads != 1:
            raise EncoderError("only single-head attention is supported")
        d_in, d_k = self.w_q.shape
        if self.w_k.shape != (d_in, d_k) or self.w_v.shape != (d_in, d_k):
            raise EncoderError("w_q/w_k/w_v shapes disagree")
        if d_k < 1:
            raise EncoderError("d_k must be positive")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


def self_attention(h: Tensor, params: AttentionParams) -> Tensor:
    """Z = softmax(QK^T / sqrt(d_k)) V; rows of h attend within their batch."""
    q = matmul(h, params.w_q)
    k = matmul(h, params.w_k)
    v = matmul(h, params.w_v)
    logits = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(params.d_k))
    return matmul(softmax_rows(logits), v)


def ffn(z: Tensor, params: AttentionParams, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Dropout, layer norm, FC, ReLU, dropout, FC, layer norm, with residuals.

    Residual 1 adds z after the first dropout; residual 2 adds the pre-FC
    activations after the second FC, before the final layer norm.
    """
    p = params.dropout_p
    x = add(dropout(z, p, mode, rng), z)
    u = layer_norm(x, params.ln1_gain, params.ln1_bias)
    hidden = relu(add(matmul(u, params.fc1_w), params.fc1_b))
    hidden = dropout(hidden, p, mode, rng)
    out = add(matmul(hidden, params.fc2_w), params.fc2_b)
    return layer_norm(add(out, u), params.ln2_gain, params.ln2_bias)


@dataclass(frozen=True)
class WindowBatch:
    """Constant per-case windowing of the pixel features.

    rows: (num_windows, window_pixels, 18) float64, zero rows where a window
    hangs past the slice edge; crop: for each pixel in lexicographic (x,y,z)
    order, its row index into the flattened (num_windows * window_pixels)
    output.
    """

    rows: np.ndarray
    crop: np.ndarray


def window_partition(feature_rows: np.ndarray, image_shape: tuple[int, int, int], window: WindowConfig) -> WindowBatch:
    """Partition per-pixel feature rows into per-slice 2D windows."""
    nx, ny, nz = image_shape
    channels = feature_rows.shape[1]
    if feature_rows.shape != (nx * ny * nz, channels):
        raise EncoderError(f"feature rows {feature_rows.shape} do not match image shape {image_shape}")
    if nx * ny * nz == 0:
        raise EncoderError("empty image grid")
    wx, wy = window.height, window.width
    nwx = -(-nx // wx)
    nwy = -(-ny // wy)
    padded = np.zeros((nz, nwx * wx, nwy * wy, channels), dtype=np.float64)
    volume = feature_rows.reshape(nx, ny, nz, channels)
    padded[:, :nx, :ny, :] = volume.transpose(2, 0, 1, 3)
    rows = (
        padded.reshape(nz, nwx, wx, nwy, wy, channels)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(nz * nwx * nwy, wx * wy, channels)
    )
    xs = np.arange(nx)[:, None, None]
    ys = np.arange(ny)[None, :, None]
    zs = np.arange(nz)[None, None, :]
    batch = zs * (nwx * nwy) + (xs // wx) * nwy + (ys // wy)
    row_in_window = (xs % wx) * wy + (ys % wy)
    crop = (batch * (wx * wy) + row_in_window).reshape(-1).astype(np.int64)
    return WindowBatch(rows=rows, crop=crop)


def encode_windows(
    batch: WindowBatch,
    proj_w: Tensor,
    proj_b: Tensor,
    params: AttentionParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Projection, windowed attention, and FFN over a prepared window batch."""
    x = Tensor(batch.rows)
    h = relu(add(matmul(x, proj_w), proj_b))
    z = self_attention(h, params)
    y = ffn(z, params, mode, rng)
    flat = reshape(y, (batch.rows.shape[0] * batch.rows.shape[1], params.d_k))
    return gather_rows(flat, batch.crop)


def encode_image(
    features,
    window: WindowConfig,
    proj_w: Tensor,
    proj_b: Tensor,
    params: AttentionParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-pixel embeddings (num_pixels, d_k), pixels in lexicographic order."""
    batch = window_partition(features.rows(), features.shape, window)
    return encode_windows(batch, proj_w, proj_b, params, mode, rng)


@dataclass(frozen=True)
class PromptEmbedding:
    """Fixed-width prompt vector and where it came from."""

    vector: np.ndarray  # (width,) float64
    source: str  # hashed | remote

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise EncoderError("prompt embedding must be a finite vector")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @property
    def width(self) -> int:
        return self.vector.shape[0]


def _stable_hash64(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def encode_prompt_hashed(text: str, width: int) -> PromptEmbedding:
    """Deterministic bag-of-words embedding: signed hashed buckets, L2-normed.

    Pure function of (text, width); empty or whitespace-only text maps to the
    zero vector.
    """
    if width < 1:
        raise EncoderError(f"prompt width must be >= 1, got {width}")
    counts = np.zeros(width, dtype=np.float64)
    for token in text.lower().split():
        h = _stable_hash64(token)
        sign = 1.0 if h & (1 << 63) == 0 else -1.0
        counts[h % width] += sign
    norm = float(np.linalg.norm(counts))
    if norm > 0.0:
        counts /= norm
    return PromptEmbedding(counts, "hashed")


def resolve_prompt_embedding(
    text: str,
    width: int,
    endpoint: str | None = None,
    timeout: float = DEFAULT_TIMEOUT_S,
) -> tuple[PromptEmbedding, str | None]:
    """Remote embedding when an endpoint is configured, hashed otherwise.

    Empty text never goes remote: it must stay the exact zero vector so that
    an empty instruction is a no-op.
    """
    if endpoint and text:
        return fetch_remote_embedding(endpoint, text, width, timeout)
    return encode_prompt_hashed(text, width), None


def fetch_remote_embedding(
    endpoint: str,
    text: str,
    width: int,
    timeout: float = DEFAULT_TIMEOUT_S,
) -> tuple[PromptEmbedding, str | None]:
    """Prompt embedding from a remote service, hashed fallback on any failure.

    POSTs {"text", "width"} and expects {"embedding": [floats]} of exactly
    `width` entries. Returns (embedding, warning); the warning is None when
    the remote call succeeded.
    """
    try:
        response = httpx.post(endpoint, json={"text": text, "width": width}, timeout=timeout)
        response.raise_for_status()
        payload = response.json()
        vector = np.asarray(payload["embedding"], dtype=np.float64)
        if vector.shape != (width,):
            raise EncoderError(f"expected width {width}, got shape {vector.shape}")
        if not np.all(np.isfinite(vector)):
            raise EncoderError("non-finite embedding entries")
        return PromptEmbedding(vector, "remote"), None
    except (httpx.HTTPError, EncoderError, KeyError, TypeError, ValueError) as exc:
        warning = f"remote embedding failed ({exc.__class__.__name__}: {exc}); using hashed fallback"
        return encode_prompt_hashed(text, width), warning
