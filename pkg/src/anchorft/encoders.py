"""Two-tower MLP encoders mapping raw features to unit embeddings.

Each tower is affine -> tanh -> affine followed by L2 normalization.
Backpropagation is closed-form; for pre-normalization output u with unit
embedding e = u/|u|, the normalization Jacobian is (I - e e^T)/|u|.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ZERO_NORM_THRESHOLD,
    ZeroVectorError,
    as_float_array,
    gaussian_stream,
)

__all__ = [
    "DEFAULT_LOG_TAU",
    "DualEncoderParams",
    "EncodeCache",
    "EncoderParams",
    "ParamGrads",
    "encode",
    "encode_batch",
    "encoder_backward",
    "encoder_backward_batch",
    "init_params",
    "param_fingerprint",
    "zero_grads",
]

# Temperature starts at 0.07, the usual contrastive default, and must stay
# in a sane band.
DEFAULT_LOG_TAU = math.log(0.07)
TAU_MIN = 1e-4
TAU_MAX = 10.0

MODALITIES = ("image", "text")
_LEAF_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class EncoderParams:
    """One tower: w1 (hidden, in), b1 (hidden,), w2 (embed, hidden), b2 (embed,)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("w1 and w2 must be matrices")
        hidden, _ = self.w1.shape
        embed, hidden2 = self.w2.shape
        if self.b1.shape != (hidden,) or hidden2 != hidden or self.b2.shape != (embed,):
            raise ValueError("encoder parameter shapes are inconsistent")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def leaves(self):
        """(name, array) pairs in the fixed serialization order."""
        for name in _LEAF_NAMES:
            yield name, getattr(self, name)


@dataclass
class DualEncoderParams:
    """Both towers plus the shared temperature, stored as log_tau."""

    image: EncoderParams
    text: EncoderParams
    log_tau: float = DEFAULT_LOG_TAU

    def __post_init__(self):
        self.log_tau = float(self.log_tau)
        if self.image.embed_dim != self.text.embed_dim:
            raise ValueError("image and text towers must share the embedding dim")
        tau = math.exp(self.log_tau)
        if not TAU_MIN < tau < TAU_MAX:
            raise ValueError(f"tau {tau:.4g} outside ({TAU_MIN}, {TAU_MAX})")

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @property
    def embed_dim(self) -> int:
        return self.image.embed_dim

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(self.image.copy(), self.text.copy(), self.log_tau)

    def tower(self, modality: str) -> EncoderParams:
        if modality == "image":
            return self.image
        if modality == "text":
            return self.text
        raise ValueError(f"unknown modality {modality!r}")


@dataclass
class ParamGrads:
    """Gradient accumulator congruent with DualEncoderParams."""

    image: EncoderParams
    text: EncoderParams
    log_tau: float = 0.0

    def add_tower(self, modality: str, grads: EncoderParams, scale: float = 1.0) -> None:
        """In-place `acc += scale * grads` on one tower."""
        acc = self.image if modality == "image" else self.text
        acc.w1 += scale * grads.w1
        acc.b1 += scale * grads.b1
        acc.w2 += scale * grads.w2
        acc.b2 += scale * grads.b2


def zero_grads(params: DualEncoderParams) -> ParamGrads:
    def zeros_like(p: EncoderParams) -> EncoderParams:
        return EncoderParams(
            np.zeros_like(p.w1), np.zeros_like(p.b1), np.zeros_like(p.w2), np.zeros_like(p.b2)
        )

    return ParamGrads(zeros_like(params.image), zeros_like(params.text), 0.0)


def init_params(
    seed: int, input_dims: tuple[int, int], hidden: int, embed_dim: int
) -> DualEncoderParams:
    """Seeded initialization: gaussian weights scaled by 1/sqrt(fan_in), zero biases.

    Draw order is fixed: image tower w1 then w2 (row-major), then the text
    tower, so a given seed always produces the same parameters.
    """
    img_dim, txt_dim = input_dims
    if min(img_dim, txt_dim, hidden) < 1 or embed_dim < 2:
        raise ValueError("dims must be positive and embed_dim at least 2")
    stream = gaussian_stream(seed)

    def tower(in_dim: int) -> EncoderParams:
        w1 = stream.normal_matrix(hidden, in_dim) / math.sqrt(in_dim)
        w2 = stream.normal_matrix(embed_dim, hidden) / math.sqrt(hidden)
        return EncoderParams(w1, np.zeros(hidden), w2, np.zeros(embed_dim))

    return DualEncoderParams(tower(img_dim), tower(txt_dim), DEFAULT_LOG_TAU)


@dataclass
class EncodeCache:
    """Forward activations kept for the backward pass."""

    x: np.ndarray  # (n, in)
    h: np.ndarray  # (n, hidden), post-tanh
    e: np.ndarray  # (n, embed), unit rows
    norms: np.ndarray  # (n,), pre-normalization lengths


def encode_batch(
    params: DualEncoderParams, modality: str, raw_batch
) -> tuple[np.ndarray, EncodeCache]:
    """Embed a batch of raw feature rows; returns unit embeddings and the cache."""
    tower = params.tower(modality)
    x = as_float_array(raw_batch, name="raw features")
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != tower.input_dim:
        raise ValueError(
            f"{modality} features must have {tower.input_dim} columns, got shape {x.shape}"
        )
    h = np.tanh(x @ tower.w1.T + tower.b1)
    u = h @ tower.w2.T + tower.b2
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms <= ZERO_NORM_THRESHOLD):
        raise ZeroVectorError("encoder produced a zero-length pre-normalization vector")
    e = u / norms[:, None]
    return e, EncodeCache(x=x, h=h, e=e, norms=norms)


def encode(params: DualEncoderParams, modality: str, raw) -> np.ndarray:
    """Embed a single raw feature vector to a unit-length embedding."""
    raw = as_float_array(raw, name="raw feature")
    if raw.ndim != 1:
        raise ValueError("encode expects a single 1-D feature vector")
    embeddings, _ = encode_batch(params, modality, raw[None, :])
    return embeddings[0]


def encoder_backward_batch(
    params: DualEncoderParams, modality: str, cache: EncodeCache, grad_embeddings
) -> EncoderParams:
    """Parameter gradients for one tower given d(loss)/d(embeddings).

    Gradients of all rows are summed. The normalization backward is
    du = (dE - (dE . e) e)/|u| per row.
    """
    tower = params.tower(modality)
    de = as_float_array(grad_embeddings, name="embedding grads")
    if de.shape != cache.e.shape:
        raise ValueError("embedding grads must match the cached embeddings' shape")
    proj = np.sum(de * cache.e, axis=1, keepdims=True)
    du = (de - proj * cache.e) / cache.norms[:, None]
    dw2 = du.T @ cache.h
    db2 = du.sum(axis=0)
    dh = du @ tower.w2
    dz1 = (1.0 - cache.h**2) * dh
    dw1 = dz1.T @ cache.x
    db1 = dz1.sum(axis=0)
    return EncoderParams(dw1, db1, dw2, db2)


def encoder_backward(
    params: DualEncoderParams, modality: str, raw, grad_embedding
) -> EncoderParams:
    """Single-sample convenience wrapper around encoder_backward_batch."""
    raw = as_float_array(raw, name="raw feature")
    _, cache = encode_batch(params, modality, raw[None, :])
    grad = as_float_array(grad_embedding, name="embedding grad")
    return encoder_backward_batch(params, modality, cache, grad[None, :])


def param_fingerprint(params: DualEncoderParams) -> str:
    """Content hash of the parameters (canonical little-endian bytes).

    Ties candidate indexes to the exact checkpoint that produced them.
    """
    digest = hashlib.sha256()
    for tower_name, tower in (("image", params.image), ("text", params.text)):
        for leaf_name, arr in tower.leaves():
            digest.update(f"{tower_name}.{leaf_name}".encode())
            digest.update(struct.pack("<q", arr.ndim))
            for dim in arr.shape:
                digest.update(struct.pack("<q", dim))
            digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    digest.update(b"log_tau")
    digest.update(struct.pack("<d", params.log_tau))
    return digest.hexdigest()
