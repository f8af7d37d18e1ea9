"""Co-attention between a moving and a fixed feature map.

Both maps are flattened to N x C (N = W*H*D). A similarity matrix between
projected moving and fixed features drives two attention read-outs, one per
stream; each read-out is gated by a per-position sigmoid and fused with the
stream's own features through a pointwise projection.

The 1x1x1 convolutions of a CNN are pointwise linear maps, so they appear here
as matrix products on the flattened maps.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_MAX_POSITIONS = 4096


class AttentionBudgetError(ValueError):
    """The N x N similarity matrix would exceed the configured budget."""


@dataclass
class CoAttentionParams:
    w_f: Tensor
    w_g: Tensor
    w_h1: Tensor
    w_h2: Tensor
    gate_mov: Tensor
    gate_mov_bias: Tensor
    gate_fix: Tensor
    gate_fix_bias: Tensor
    out_mov: Tensor
    out_mov_bias: Tensor
    out_fix: Tensor
    out_fix_bias: Tensor
    # per-channel affine standing in for batch normalisation
    scale_mov: Tensor
    shift_mov: Tensor
    scale_fix: Tensor
    shift_fix: Tensor

    @property
    def channels(self) -> int:
        return self.w_f.shape[0]

    @classmethod
    def init(cls, channels: int, seed: int = 0) -> "CoAttentionParams":
        """Projections ~ U(-1/sqrt(C), 1/sqrt(C)); gates start at zero (sigmoid 0.5)."""
        if channels < 1:
            raise ValueError("channel count must be positive")
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(channels)

        def uni(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value), requires_grad=True)

        c = channels
        return cls(
            w_f=uni(c, c),
            w_g=uni(c, c),
            w_h1=uni(c, c),
            w_h2=uni(c, c),
            gate_mov=const(0.0, c, 1),
            gate_mov_bias=const(0.0, 1),
            gate_fix=const(0.0, c, 1),
            gate_fix_bias=const(0.0, 1),
            out_mov=uni(2 * c, c),
            out_mov_bias=uni(c),
            out_fix=uni(2 * c, c),
            out_fix_bias=uni(c),
            scale_mov=const(1.0, c),
            shift_mov=const(0.0, c),
            scale_fix=const(1.0, c),
            shift_fix=const(0.0, c),
        )

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).data for f in fields(self)}

    def save(self, path) -> None:
        np.savez(path, **self.named_arrays())

    @classmethod
    def load(cls, path) -> "CoAttentionParams":
        with np.load(path) as z:
            missing = {f.name for f in fields(cls)} - set(z.files)
            if missing:
                raise ValueError(f"parameter file lacks {sorted(missing)}")
            params = cls(**{f.name: Tensor(z[f.name], requires_grad=True) for f in fields(cls)})
        params.validate()
        return params

    def validate(self) -> None:
        c = self.channels
        expect = {
            "w_f": (c, c), "w_g": (c, c), "w_h1": (c, c), "w_h2": (c, c),
            "gate_mov": (c, 1), "gate_mov_bias": (1,), "gate_fix": (c, 1), "gate_fix_bias": (1,),
            "out_mov": (2 * c, c), "out_mov_bias": (c,), "out_fix": (2 * c, c), "out_fix_bias": (c,),
            "scale_mov": (c,), "shift_mov": (c,), "scale_fix": (c,), "shift_fix": (c,),
        }
        for name, shape in expect.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"{name}: non-finite values")


def flatten(feat: Tensor) -> Tensor:
    """(C, W, H, D) -> (N, C)."""
    c = feat.shape[0]
    return ad.transpose(ad.reshape(feat, (c, -1)))


def unflatten(flat: Tensor, spatial) -> Tensor:
    """(N, C) -> (C, W, H, D)."""
    return ad.reshape(ad.transpose(flat), (flat.shape[1], *spatial))


def _fuse(x, att, gate_w, gate_b, w_out, b_out, scale, shift):
    gate = ad.sigmoid(att @ gate_w + gate_b)  # one scalar per position
    gated = gate * att
    fused = ad.concat([x, gated], axis=1) @ w_out + b_out
    return ad.relu(fused * scale + shift)


def coattend(
    f_mov,
    f_fix,
    p: CoAttentionParams,
    max_positions: int = DEFAULT_MAX_POSITIONS,
    return_intermediates: bool = False,
):
    """Co-attention forward pass on two (C, W, H, D) maps.

    Returns ``(o_mov, o_fix)``, each shaped like the inputs, or
    ``(o_mov, o_fix, extras)`` with the similarity matrix, both softmax
    matrices and both attention read-outs when ``return_intermediates``.
    """
    f_mov, f_fix = ad.as_tensor(f_mov), ad.as_tensor(f_fix)
    if f_mov.shape != f_fix.shape:
        raise ValueError(f"feature maps differ in shape: {f_mov.shape} vs {f_fix.shape}")
    if f_mov.ndim != 4:
        raise ValueError(f"feature maps must be (C, W, H, D), got {f_mov.shape}")
    if f_mov.shape[0] != p.channels:
        raise ValueError(f"feature maps have {f_mov.shape[0]} channels, parameters expect {p.channels}")
    spatial = f_mov.shape[1:]
    n = int(np.prod(spatial))
    if n > max_positions:
        raise AttentionBudgetError(
            f"co-attention over N={n} positions needs an N x N = {n * n} similarity matrix, "
            f"budget allows N <= {max_positions}"
        )

    x_mov, x_fix = flatten(f_mov), flatten(f_fix)
    sim = (x_mov @ p.w_f) @ ad.transpose(x_fix @ p.w_g)
    a_mov = ad.softmax(sim, axis=-1)
    a_fix = ad.softmax(ad.transpose(sim), axis=-1)
    att_mov = a_mov @ (x_fix @ p.w_h2)
    att_fix = a_fix @ (x_mov @ p.w_h1)

    o_mov = _fuse(x_mov, att_mov, p.gate_mov, p.gate_mov_bias, p.out_mov, p.out_mov_bias, p.scale_mov, p.shift_mov)
    o_fix = _fuse(x_fix, att_fix, p.gate_fix, p.gate_fix_bias, p.out_fix, p.out_fix_bias, p.scale_fix, p.shift_fix)
    o_mov, o_fix = unflatten(o_mov, spatial), unflatten(o_fix, spatial)
    if return_intermediates:
        extras = {"similarity": sim, "softmax_mov": a_mov, "softmax_fix": a_fix, "att_mov": att_mov, "att_fix": att_fix}
        return o_mov, o_fix, extras
    return o_mov, o_fix
