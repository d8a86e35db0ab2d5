"""Reference two-layer convolutional embedding network with manual backprop.

Architecture: 3x3 same-padding conv -> ReLU -> 3x3 same-padding conv ->
per-pixel L2 normalization. Teacher and student share the architecture and
differ only in width (default 32 vs 4 channels). Convolutions run as im2col
matrix products; the backward pass is exact reverse mode, checked against
finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensors import (
    EPS_NORM,
    DimensionError,
    DomainError,
    EmbeddingMap,
    FormatError,
    pack_tensor,
    unpack_tensor,
)

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b")


@dataclass
class ConvNetParams:
    conv1_w: np.ndarray  # (C, 1, 3, 3)
    conv1_b: np.ndarray  # (C,)
    conv2_w: np.ndarray  # (D, C, 3, 3)
    conv2_b: np.ndarray  # (D,)

    def __post_init__(self):
        c = self.conv1_w.shape[0]
        d = self.conv2_w.shape[0]
        if self.conv1_w.shape != (c, 1, 3, 3) or self.conv1_b.shape != (c,):
            raise DimensionError(f"conv1 shapes inconsistent: {self.conv1_w.shape}")
        if self.conv2_w.shape != (d, c, 3, 3) or self.conv2_b.shape != (d,):
            raise DimensionError(f"conv2 shapes inconsistent: {self.conv2_w.shape}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} contains non-finite values")

    @property
    def width(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.conv2_w.shape[0]

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ConvNetParams":
        return ConvNetParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def checksum(self) -> float:
        return float(sum(np.sum(np.abs(getattr(self, n))) for n in PARAM_NAMES))


def init_params(width: int, embed_dim: int, rng: np.random.Generator) -> ConvNetParams:
    """Intensity-hinge initialization.

    Layer 1 starts as a bank of one-sided ramp detectors: channel k's center
    tap has weight +-2 and its bias places the ReLU hinge at an evenly spaced
    intensity, so channels respond selectively to gray levels from the first
    iteration; off-center taps start near zero and learn spatial context.
    Layer 2 starts small so that what it learns dominates the embedding
    direction (the output is normalized per pixel, so only direction
    matters). Width is the capacity knob: it sets how finely the intensity
    axis is tiled.
    """
    w1 = rng.normal(0.0, 0.05, size=(width, 1, 3, 3))
    signs = np.where(np.arange(width) % 2 == 0, 1.0, -1.0)
    hinges = (np.arange(width) + 0.5) / width
    w1[:, 0, 1, 1] = signs * 2.0
    b1 = -signs * 2.0 * hinges
    w2 = np.zeros((embed_dim, width, 3, 3))
    w2[:, :, 1, 1] = rng.normal(0.0, 1e-2, size=(embed_dim, width))
    return ConvNetParams(w1, b1, w2, np.zeros(embed_dim))


def _as_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != 1:
        raise DimensionError(f"image must be 1 x H x W, got {image.shape}")
    if image.shape[1] < 3 or image.shape[2] < 3:
        raise DimensionError(f"image must be at least 3 x 3, got {image.shape[1:]}")
    if not np.all(np.isfinite(image)):
        raise DomainError("image contains non-finite values")
    return image


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H*W, C*9) patch matrix for a 3x3 same-padding conv."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def _col2im3(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col3: scatter patch gradients back onto the image."""
    d = dcols.reshape(h, w, c, 3, 3).transpose(2, 0, 1, 3, 4)
    padded = np.zeros((c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            padded[:, i : i + h, j : j + w] += d[:, :, :, i, j]
    return padded[:, 1 : h + 1, 1 : w + 1]


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    c_out = weight.shape[0]
    _, h, w = x.shape
    cols = _im2col3(x)
    out = cols @ weight.reshape(c_out, -1).T + bias
    return out.T.reshape(c_out, h, w), cols


def forward_with_cache(params: ConvNetParams, image) -> tuple[np.ndarray, dict]:
    image = _as_image(image)
    pre1, cols1 = _conv3x3(image, params.conv1_w, params.conv1_b)
    act1 = np.maximum(pre1, 0.0)
    pre2, cols2 = _conv3x3(act1, params.conv2_w, params.conv2_b)
    norms = np.sqrt(np.sum(pre2 * pre2, axis=0))
    degenerate = norms < EPS_NORM
    safe = np.where(degenerate, 1.0, norms)
    out = pre2 / safe
    out[:, degenerate] = 0.0
    cache = {
        "image": image,
        "cols1": cols1,
        "relu_mask": pre1 > 0.0,
        "cols2": cols2,
        "pre2": pre2,
        "safe": safe,
        "degenerate": degenerate,
        "unit": out,
    }
    return out, cache


def forward(params: ConvNetParams, image) -> EmbeddingMap:
    """Embedding map for one image: conv -> ReLU -> conv -> pixel L2 norm."""
    out, _ = forward_with_cache(params, image)
    return EmbeddingMap(out)


def backward(
    params: ConvNetParams, image, grad_embedding: np.ndarray, cache: dict | None = None
) -> dict:
    """Parameter gradients given d(loss)/d(embedding map).

    Recomputes the forward pass unless a cache from forward_with_cache is
    supplied. Returns a dict keyed like ConvNetParams.as_dict().
    """
    if cache is None:
        _, cache = forward_with_cache(params, image)
    grad_embedding = np.asarray(grad_embedding, dtype=np.float64)
    d, h, w = cache["pre2"].shape
    if grad_embedding.shape != (d, h, w):
        raise DimensionError(
            f"gradient shape {grad_embedding.shape} does not match output {(d, h, w)}"
        )

    # normalization: d(pre2) = (g - (unit . g) unit) / ||pre2||
    unit = cache["unit"]
    inner = np.sum(unit * grad_embedding, axis=0, keepdims=True)
    dpre2 = (grad_embedding - inner * unit) / cache["safe"]
    dpre2[:, cache["degenerate"]] = 0.0

    dflat2 = dpre2.reshape(d, -1).T  # (HW, D)
    dconv2_w = (dflat2.T @ cache["cols2"]).reshape(params.conv2_w.shape)
    dconv2_b = dflat2.sum(axis=0)
    dact1 = _col2im3(dflat2 @ params.conv2_w.reshape(d, -1), params.width, h, w)

    dpre1 = dact1 * cache["relu_mask"]
    dflat1 = dpre1.reshape(params.width, -1).T
    dconv1_w = (dflat1.T @ cache["cols1"]).reshape(params.conv1_w.shape)
    dconv1_b = dflat1.sum(axis=0)

    return {
        "conv1_w": dconv1_w,
        "conv1_b": dconv1_b,
        "conv2_w": dconv2_w,
        "conv2_b": dconv2_b,
    }


class AdamState:
    """First/second moment buffers and step counter for one parameter set."""

    def __init__(self, params: ConvNetParams):
        self.m = {n: np.zeros_like(p) for n, p in params.as_dict().items()}
        self.v = {n: np.zeros_like(p) for n, p in params.as_dict().items()}
        self.t = 0


def adam_step(
    params: ConvNetParams,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    for name, p in params.as_dict().items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1**state.t)
        v_hat = state.v[name] / (1.0 - beta2**state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# Checkpoints: u32 record count, then per record a u32 name length, the
# utf-8 name, and one tensor_core record (f32). A sidecar text file with the
# training configuration is written next to the checkpoint by the trainer.
# --------------------------------------------------------------------------


def save_checkpoint(path, params: ConvNetParams) -> None:
    blob = struct.pack("<I", len(PARAM_NAMES))
    for name in PARAM_NAMES:
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += pack_tensor(getattr(params, name).astype(np.float32))
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path) -> ConvNetParams:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise FormatError("truncated checkpoint header", 0)
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    tensors = {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise FormatError("truncated name length", pos)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + name_len:
            raise FormatError("truncated name", pos)
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        array, pos = unpack_tensor(buf, pos)
        tensors[name] = array.astype(np.float64)
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise FormatError(f"checkpoint missing parameters {missing}", pos)
    return ConvNetParams(*(tensors[n] for n in PARAM_NAMES))
