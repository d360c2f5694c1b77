"""Reversible spatial transforms: orthonormal 2-D Haar and an affine coupling block.

Both directions are exact inverses of each other, so no information is lost
when features are moved between resolutions. The Haar transform here is the
orthonormal variant (each 2x2 patch is multiplied by an orthogonal matrix),
which keeps the L2 norm of the signal unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, NumericError
from .nn import Conv2d, Module


@dataclass
class HaarSpec:
    """Number of cascaded Haar applications (each level: C,H,W -> 4C,H/2,W/2)."""
    levels: int = 3


def _haar_fwd_np(x: np.ndarray) -> np.ndarray:
    a = x[:, 0::2, 0::2]
    b = x[:, 0::2, 1::2]
    c = x[:, 1::2, 0::2]
    d = x[:, 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return np.concatenate([ll, lh, hl, hh], axis=0)


def _haar_inv_np(y: np.ndarray) -> np.ndarray:
    c4, h, w = y.shape
    c = c4 // 4
    ll, lh, hl, hh = y[:c], y[c:2 * c], y[2 * c:3 * c], y[3 * c:]
    out = np.empty((c, 2 * h, 2 * w), dtype=np.float32)
    out[:, 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[:, 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[:, 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[:, 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def haar_forward(x: Tensor) -> Tensor:
    """One orthonormal Haar level: [C,H,W] -> [4C,H/2,W/2], channels [LL,LH,HL,HH].

    Each 2x2 patch (a,b,c,d) maps to ((a+b+c+d)/2, (a-b+c-d)/2, (a+b-c-d)/2,
    (a-b-c+d)/2); the map is orthogonal, so energy is preserved exactly.
    """
    if x.data.ndim != 3:
        raise DimensionError("haar_forward expects a [C,H,W] tensor")
    _, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"haar_forward needs even spatial dims, got {h}x{w}")
    out = Tensor._op(_haar_fwd_np(x.data), (x,))
    if out.requires_grad:
        def _bw():
            # orthogonal transform: gradient maps back through the inverse
            x._accum(_haar_inv_np(out.grad))
        out._backward = _bw
    return out


def haar_inverse(y: Tensor) -> Tensor:
    """Exact inverse of :func:`haar_forward`: [4C,H,W] -> [C,2H,2W]."""
    if y.data.ndim != 3:
        raise DimensionError("haar_inverse expects a [4C,H,W] tensor")
    if y.data.shape[0] % 4:
        raise DimensionError(f"haar_inverse needs channels divisible by 4, got {y.data.shape[0]}")
    out = Tensor._op(_haar_inv_np(y.data), (y,))
    if out.requires_grad:
        def _bw():
            y._accum(_haar_fwd_np(out.grad))
        out._backward = _bw
    return out


def haar_cascade(x: Tensor, levels: int) -> Tensor:
    """Apply ``levels`` Haar transforms to all channels (4^levels channel growth)."""
    for _ in range(levels):
        x = haar_forward(x)
    return x


def haar_cascade_inverse(y: Tensor, levels: int) -> Tensor:
    for _ in range(levels):
        y = haar_inverse(y)
    return y


class CouplingBlock(Module):
    """Affine coupling over two channel groups; invertible in closed form.

    forward:  y1 = x + mix(f);  y2 = f * exp(s(y1)) + shift(y1)
    inverse:  f  = (y2 - shift(y1)) * exp(-s(y1));  x = y1 - mix(f)

    ``s`` is clamped with a scaled tanh so exp() can never overflow. Each
    subnet is two 3x3 convs around one nonlinearity with the final conv
    zero-initialized, making the whole block the identity at init.
    """

    SCALE_GUARD = 20.0

    def __init__(self, split_a: int, split_b: int, hidden: int, rng: np.random.Generator,
                 scale_clamp: float = 5.0):
        self.split_a = split_a
        self.split_b = split_b
        self.scale_clamp = scale_clamp
        self.scale_net = _Subnet(split_a, split_b, hidden, rng)
        self.shift_net = _Subnet(split_a, split_b, hidden, rng)
        self.mix_net = _Subnet(split_b, split_a, hidden, rng)

    def _scale(self, y1: Tensor) -> Tensor:
        raw = self.scale_net(y1)
        s = ag.mul(ag.tanh(ag.mul(raw, 1.0 / self.scale_clamp)), self.scale_clamp)
        if float(np.abs(s.data).max(initial=0.0)) > self.SCALE_GUARD:
            raise NumericError("coupling scale exceeds exp guard")
        return s

    def _check(self, x: Tensor, f: Tensor) -> None:
        if x.data.shape[0] != self.split_a or f.data.shape[0] != self.split_b:
            raise DimensionError(
                f"coupling split mismatch: got {x.data.shape[0]}/{f.data.shape[0]}, "
                f"expected {self.split_a}/{self.split_b}")
        if x.data.shape[1:] != f.data.shape[1:]:
            raise DimensionError("coupling inputs must share spatial dims")

    def forward(self, x: Tensor, f: Tensor) -> tuple[Tensor, Tensor]:
        self._check(x, f)
        y1 = x + self.mix_net(f)
        y2 = f * ag.texp(self._scale(y1)) + self.shift_net(y1)
        return y1, y2

    def inverse(self, y1: Tensor, y2: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (f, x): the exact preimages of a forward pass."""
        self._check(y1, y2)
        f = (y2 - self.shift_net(y1)) * ag.texp(-self._scale(y1))
        x = y1 - self.mix_net(f)
        return f, x


class _Subnet(Module):
    def __init__(self, out_ch: int, in_ch: int, hidden: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, out_ch, 3, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(ag.gelu(self.conv1(x)))


def coupling_forward(block: CouplingBlock, x: Tensor, f: Tensor) -> tuple[Tensor, Tensor]:
    return block.forward(x, f)


def coupling_inverse(block: CouplingBlock, y1: Tensor, y2: Tensor) -> tuple[Tensor, Tensor]:
    return block.inverse(y1, y2)
