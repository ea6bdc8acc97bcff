"""Negative-padding rewrite for convolutions over asymmetric activations.

h-swish outputs live in [-0.375, inf): shifting by the constant minimum m =
-0.375 splits each activation into a constant negative part and a shifted
non-negative part. By linearity, convolving the original activations padded
with m equals convolving the shifted activations padded with 0 plus a
precomputable channel-wise bias m * sum(weight). The shifted path keeps the
whole tensor non-negative (integer-friendly, zero-skippable) and the edge
contribution collapses to one bias value per output channel instead of
position-dependent corrections.

Everything here runs at simulation level (float64); the deliverable is the
algebraic identity itself, verified to ~1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import conv2d_raw

__all__ = [
    "H_SWISH_MIN",
    "NegPadRewrite",
    "shift_decompose",
    "negpad_bias",
    "negpad_conv",
    "verify_rewrite",
    "zero_fraction",
]

H_SWISH_MIN = -0.375  # global minimum of x*relu6(x+3)/6, attained at x = -1.5


def shift_decompose(activations: np.ndarray, m: float) -> np.ndarray:
    """Shift activations by the constant minimum m; result >= 0 when a >= m."""
    return np.asarray(activations, dtype=np.float64) - m


def negpad_bias(weight: np.ndarray, m: float) -> np.ndarray:
    """Offline bias for the constant component: bias[o] = m * sum(weight[o])."""
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 4:
        raise ValueError("weight must be [Cout, Cin/g, kh, kw]")
    return m * w.sum(axis=(1, 2, 3))


def negpad_conv(shifted: np.ndarray, weight: np.ndarray, bias_c: np.ndarray,
                stride=1, padding=0, groups: int = 1) -> np.ndarray:
    """Zero-padded conv of the shifted activations plus the channel bias.

    Equals conv2d(original, weight, pad_value=m) exactly: padding the original
    with m is the same as padding the shifted input with 0.
    """
    out = conv2d_raw(shifted, weight, stride=stride, padding=padding,
                     pad_value=0.0, groups=groups)
    return out + np.asarray(bias_c, dtype=np.float64)[None, :, None, None]


@dataclass
class NegPadRewrite:
    """A conv layer rewritten to shifted-input + negative padding + bias."""

    shift_m: float
    weight: np.ndarray
    stride: int | tuple[int, int] = 1
    padding: int | tuple[int, int] = 0
    groups: int = 1
    bias_c: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias_c = negpad_bias(self.weight, self.shift_m)

    def original(self, activations: np.ndarray) -> np.ndarray:
        """Reference path: convolve the raw activations, padded with m."""
        return conv2d_raw(activations, self.weight, stride=self.stride,
                          padding=self.padding, pad_value=self.shift_m,
                          groups=self.groups)

    def rewritten(self, activations: np.ndarray) -> np.ndarray:
        """Shift, zero-pad convolve, add the precomputed channel bias."""
        return negpad_conv(shift_decompose(activations, self.shift_m),
                           self.weight, self.bias_c, stride=self.stride,
                           padding=self.padding, groups=self.groups)


def verify_rewrite(rewrite: NegPadRewrite, input_shape: tuple[int, ...],
                   trials: int, rng: np.random.Generator,
                   quantizer=None) -> float:
    """Max |rewritten - original| over random h-swish-shaped activations.

    Inputs are drawn, passed through h-swish so they live on the true
    activation range (min -0.375), optionally fake-quantized with a grid whose
    bottom level is the shift constant, then run through both paths.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    from .tensor import h_swish_raw

    worst = 0.0
    for _ in range(trials):
        acts = h_swish_raw(rng.normal(0.0, 2.0, size=input_shape))
        if quantizer is not None:
            acts = quantizer.apply(acts)
        diff = np.abs(rewrite.rewritten(acts) - rewrite.original(acts))
        worst = max(worst, float(diff.max()))
    return worst


def zero_fraction(activations: np.ndarray, m: float) -> float:
    """Fraction of exact zeros after shifting quantized activations by m."""
    shifted = shift_decompose(activations, m)
    return float(np.mean(shifted == 0.0))
