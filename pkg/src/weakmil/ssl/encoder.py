"""Desk-scale patch encoder.

Three 3x3 convolution blocks (per-sample layer normalization, SiLU, 2x2
average-pool downsampling, global average pool after the last) followed by a
two-layer projection head.  The output of the head is L2-normalized and is
the patch feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ParamSet, Tensor, avg_pool2d, conv2d, glorot_uniform, l2_normalize, matmul
from ..imaging import box_downsample
from ..preprocess import resize_patch

_MEAN, _SCALE = 127.5, 64.0
_NORM_EPS = 1e-5


@dataclass(frozen=True)
class EncoderArch:
    channels: tuple[int, int, int] = (16, 32, 64)
    head_hidden: int = 64
    feature_dim: int = 64


def init_encoder(arch: EncoderArch, rng: np.random.Generator) -> ParamSet:
    p = ParamSet()
    c_in = 3
    for i, c_out in enumerate(arch.channels, start=1):
        p[f"conv{i}.w"] = glorot_uniform(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out)
        p[f"norm{i}.g"] = np.ones(c_out)
        p[f"norm{i}.b"] = np.zeros(c_out)
        c_in = c_out
    p["head1.w"] = glorot_uniform(rng, (c_in, arch.head_hidden), c_in, arch.head_hidden)
    p["head1.b"] = np.zeros(arch.head_hidden)
    p["head2.w"] = glorot_uniform(rng, (arch.head_hidden, arch.feature_dim), arch.head_hidden, arch.feature_dim)
    p["head2.b"] = np.zeros(arch.feature_dim)
    return p


def arch_of(params) -> EncoderArch:
    return EncoderArch(
        channels=tuple(int(np.shape(params[f"conv{i}.w"])[3]) for i in (1, 2, 3)),
        head_hidden=int(np.shape(params["head1.w"])[1]),
        feature_dim=int(np.shape(params["head2.w"])[1]),
    )


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def layer_norm(x: Tensor, gain, shift, eps: float = _NORM_EPS) -> Tensor:
    """Normalize each sample over (H, W, C), then apply a per-channel affine map."""
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=(1, 2, 3), keepdims=True)
    return d / (var + eps).sqrt() * _t(gain) + _t(shift)


def encode(params, batch) -> Tensor:
    """Unit-norm features for an ``(N, H, W, 3)`` batch of 0-255 pixels.

    ``params`` maps names to tensors (to differentiate) or arrays.  H and W
    must be divisible by 4.
    """
    x = Tensor((np.asarray(batch, dtype=np.float64) - _MEAN) / _SCALE)
    for i in (1, 2, 3):
        x = conv2d(x, _t(params[f"conv{i}.w"]), padding="same")
        x = layer_norm(x, params[f"norm{i}.g"], params[f"norm{i}.b"]).silu()
        if i < 3:
            x = avg_pool2d(x, 2)
    x = x.mean(axis=(1, 2))
    x = (matmul(x, _t(params["head1.w"])) + _t(params["head1.b"])).silu()
    x = matmul(x, _t(params["head2.w"])) + _t(params["head2.b"])
    return l2_normalize(x, axis=1)


def prepare_input(patches, input_px: int) -> np.ndarray:
    """Bring output-size patches to the encoder's working resolution.

    Box averaging when the size divides evenly, bilinear resize otherwise.
    Returns float64 ``(N, input_px, input_px, 3)``.
    """
    patches = np.asarray(patches)
    if patches.ndim == 3:
        patches = patches[None]
    n, px = patches.shape[0], patches.shape[1]
    if px == input_px:
        return patches.astype(np.float64)
    if n == 0:
        return np.empty((0, input_px, input_px, 3))
    if px % input_px == 0:
        return np.stack([box_downsample(p, px // input_px) for p in patches])
    return np.stack([resize_patch(p.astype(np.float64), input_px) for p in patches])


def encode_numpy(params, batch, chunk: int = 256) -> np.ndarray:
    """Inference-only features as a plain array, processed in chunks."""
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        return np.empty((0, arch_of(params).feature_dim))
    return np.concatenate([encode(params, batch[i : i + chunk]).data for i in range(0, len(batch), chunk)])
