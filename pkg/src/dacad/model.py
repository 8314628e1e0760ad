"""Shared encoder and classifier head built from dense layers.

Parameters are flat lists ``[W0, b0, W1, b1, ...]``. The encoder applies a
ReLU after every layer; the classifier applies ReLU between hidden layers
and leaves the last layer linear (its logits feed a softmax).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import (DimensionError, as_tensor, dense_backward, dense_forward,
                       relu_backward, relu_forward, softmax)


class ParamFormatError(ValueError):
    """Parameter file is corrupt or not a parameter file."""


class ParamShapeError(ValueError):
    """Stored parameter shapes do not match the requested architecture."""


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (256,)
    embed_dim: int = 64
    classifier_hidden: tuple[int, ...] = ()
    # an encoder with no layers is the identity (embed_dim must equal input_dim)
    identity_encoder: bool = False

    def __post_init__(self):
        if self.identity_encoder and self.embed_dim != self.input_dim:
            raise ValueError("identity encoder needs embed_dim == input_dim")
        for name in ("input_dim", "num_classes", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def encoder_sizes(self) -> list[int]:
        if self.identity_encoder:
            return [self.input_dim]
        return [self.input_dim, *self.hidden, self.embed_dim]

    def classifier_sizes(self) -> list[int]:
        return [self.embed_dim, *self.classifier_hidden, self.num_classes]

    def shapes(self) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
        def layer_shapes(sizes):
            out = []
            for a, b in zip(sizes[:-1], sizes[1:]):
                out += [(a, b), (b,)]
            return out
        return layer_shapes(self.encoder_sizes()), layer_shapes(self.classifier_sizes())


@dataclass
class ModelParams:
    v: list[np.ndarray]  # encoder
    w: list[np.ndarray]  # classifier

    def copy(self) -> "ModelParams":
        return ModelParams([p.copy() for p in self.v], [p.copy() for p in self.w])

    def all(self) -> list[np.ndarray]:
        return [*self.v, *self.w]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.all())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        mine, theirs = self.all(), other.all()
        return (len(self.v) == len(other.v) and len(mine) == len(theirs)
                and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                        for a, b in zip(mine, theirs)))


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """He-uniform weights, zero biases, drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    enc_shapes, clf_shapes = arch.shapes()

    def draw(shapes):
        out = []
        for shape in shapes:
            if len(shape) == 2:
                bound = np.sqrt(6.0 / shape[0])
                out.append(rng.uniform(-bound, bound, size=shape))
            else:
                out.append(np.zeros(shape))
        return out

    return ModelParams(draw(enc_shapes), draw(clf_shapes))


def _mlp_forward(layers: Sequence[np.ndarray], x: np.ndarray, relu_last: bool):
    """Returns output and the per-layer (input, preactivation) cache."""
    cache = []
    h = x
    n_layers = len(layers) // 2
    for i in range(n_layers):
        W, b = layers[2 * i], layers[2 * i + 1]
        pre = dense_forward(h, W, b)
        cache.append((h, pre))
        h = relu_forward(pre) if (relu_last or i < n_layers - 1) else pre
    return h, cache


def _mlp_backward(layers, cache, upstream, relu_last: bool):
    n_layers = len(layers) // 2
    grads: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    g = upstream
    for i in reversed(range(n_layers)):
        h, pre = cache[i]
        if relu_last or i < n_layers - 1:
            g = relu_backward(pre, g)
        dW, db, g = dense_backward(h, layers[2 * i], g)
        grads[2 * i], grads[2 * i + 1] = dW, db
    return grads, g


def _check_input(layers, x, what):
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"{what} expects a 2D batch, got shape {x.shape}")
    if layers and x.shape[1] != layers[0].shape[0]:
        raise DimensionError(f"{what} expects {layers[0].shape[0]} columns, got {x.shape[1]}")
    return x


def encode(v: Sequence[np.ndarray], x) -> tuple[np.ndarray, list]:
    """Embed a batch. Returns ``(z, cache)``; pass the cache to :func:`encode_backward`."""
    x = _check_input(v, x, "encoder")
    return _mlp_forward(v, x, relu_last=True)


def encode_backward(v, cache, dz) -> tuple[list[np.ndarray], np.ndarray]:
    return _mlp_backward(v, cache, dz, relu_last=True)


def classifier_forward(w: Sequence[np.ndarray], z) -> tuple[np.ndarray, list]:
    z = _check_input(w, z, "classifier")
    return _mlp_forward(w, z, relu_last=False)


def classifier_backward(w, cache, dlogits) -> tuple[list[np.ndarray], np.ndarray]:
    return _mlp_backward(w, cache, dlogits, relu_last=False)


def classify(w: Sequence[np.ndarray], z) -> tuple[np.ndarray, np.ndarray]:
    """Logits and their row softmax."""
    logits, _ = classifier_forward(w, z)
    return logits, softmax(logits)


def forward(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """``h_w(phi_v(x))``: returns (logits, probs)."""
    z, _ = encode(params.v, x)
    return classify(params.w, z)


def predict_labels(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row argmax (ties go to the lower class index) and its probability."""
    labels = np.argmax(probs, axis=1)
    return labels, probs[np.arange(probs.shape[0]), labels]


# -- parameter files ---------------------------------------------------------
#
# layout (little-endian):
#   magic b"DACADPRM", u32 version, u32 n_encoder, u32 n_classifier
#   per tensor: u32 ndim, ndim x u64 dims, prod(dims) x f64
#   32-byte sha256 of everything before it

_MAGIC = b"DACADPRM"
_VERSION = 1


def params_to_bytes(params: ModelParams) -> bytes:
    parts = [_MAGIC, struct.pack("<III", _VERSION, len(params.v), len(params.w))]
    for p in params.all():
        p = np.asarray(p, dtype="<f8")
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(np.ascontiguousarray(p).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def params_from_bytes(raw: bytes, arch: Architecture | None = None) -> ModelParams:
    if len(raw) < len(_MAGIC) + 12 + 32:
        raise ParamFormatError(f"parameter file too short ({len(raw)} bytes)")
    body, digest = raw[:-32], raw[-32:]
    if body[:8] != _MAGIC:
        raise ParamFormatError(f"bad magic {body[:8]!r}")
    if hashlib.sha256(body).digest() != digest:
        raise ParamFormatError("checksum mismatch (truncated or corrupted file)")
    version, n_v, n_w = struct.unpack_from("<III", body, 8)
    if version != _VERSION:
        raise ParamFormatError(f"unsupported version {version}")
    off = 20
    tensors = []
    try:
        for _ in range(n_v + n_w):
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=off)
            off += 8 * count
            tensors.append(arr.astype(np.float64).reshape(shape))
    except (struct.error, ValueError) as exc:
        raise ParamFormatError(f"malformed tensor table: {exc}") from exc
    if off != len(body):
        raise ParamFormatError(f"{len(body) - off} trailing bytes after tensors")
    params = ModelParams(tensors[:n_v], tensors[n_v:])
    if arch is not None:
        check_architecture(params, arch)
    return params


def check_architecture(params: ModelParams, arch: Architecture) -> None:
    enc, clf = arch.shapes()
    got_enc = [p.shape for p in params.v]
    got_clf = [p.shape for p in params.w]
    if got_enc != enc or got_clf != clf:
        raise ParamShapeError(f"parameters have encoder {got_enc} / classifier {got_clf}, "
                              f"architecture expects {enc} / {clf}")


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path, arch: Architecture | None = None) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes(), arch)


def architecture_of(params: ModelParams) -> Architecture:
    """Recover the layer widths stored in a parameter set."""
    enc_w = [p for p in params.v if p.ndim == 2]
    clf_w = [p for p in params.w if p.ndim == 2]
    if not clf_w:
        raise ParamShapeError("classifier has no layers")
    if not enc_w:
        d = clf_w[0].shape[0]
        return Architecture(d, clf_w[-1].shape[1], (), d, tuple(W.shape[1] for W in clf_w[:-1]),
                            identity_encoder=True)
    return Architecture(
        input_dim=enc_w[0].shape[0],
        num_classes=clf_w[-1].shape[1],
        hidden=tuple(W.shape[1] for W in enc_w[:-1]),
        embed_dim=enc_w[-1].shape[1],
        classifier_hidden=tuple(W.shape[1] for W in clf_w[:-1]),
    )
