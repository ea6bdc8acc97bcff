"""Activation-instability metric for weight-quantized layers.

A weight that crosses a quantization threshold during an update jumps by a
whole level, which skews the statistics of the layer's output activation.
This module quantifies that per layer: second-order (mean/variance) per-output
channel statistics of the pre-normalization conv output, compared before and
after an update via Gaussian KL divergence, averaged over output channels.
Layers are then ranked by the metric to decide the freezing order.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "ChannelStatsPair",
    "AiwqReport",
    "channel_stats",
    "gaussian_kl",
    "layer_aiwq",
    "sample_aiwq",
]

DEFAULT_EPS = 1e-5  # variance floor; keeps KL finite on dead channels


@dataclass
class ChannelStatsPair:
    """Per-output-channel mean/variance before and after a weight update."""

    mean_before: np.ndarray
    var_before: np.ndarray
    mean_after: np.ndarray
    var_after: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.mean_before, self.var_before,
                                    self.mean_after, self.var_after)}
        if len(shapes) != 1:
            raise ValueError("all stat arrays must share one [C] shape")
        for v in (self.var_before, self.var_after):
            if np.any(v < 0):
                raise ValueError("variances must be >= 0")
        for a in (self.mean_before, self.var_before, self.mean_after, self.var_after):
            if not np.all(np.isfinite(a)):
                raise ValueError("channel statistics must be finite")


@dataclass
class AiwqReport:
    """Per-layer instability metric (nats), keyed by layer id in network order."""

    per_layer: dict[str, float]
    iterations_sampled: int

    def __post_init__(self):
        for layer, value in self.per_layer.items():
            if value < 0:
                raise ValueError(f"metric for {layer} is negative")

    def ranked(self) -> list[tuple[str, float]]:
        """Layers sorted by metric descending; ties keep network order."""
        order = {lid: i for i, lid in enumerate(self.per_layer)}
        return sorted(self.per_layer.items(), key=lambda kv: (-kv[1], order[kv[0]]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer_id,layer_name,metric\n")
        order = {lid: i for i, lid in enumerate(self.per_layer)}
        for name, value in self.ranked():
            buf.write(f"{order[name]},{name},{value!r}\n")
        return buf.getvalue()


def channel_stats(activations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance per channel over all non-channel axes."""
    x = np.asarray(activations, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("channel_stats expects [N, C, H, W]")
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise ValueError("need at least 2 samples per channel")
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


def gaussian_kl(m1, v1, m2, v2, eps: float = DEFAULT_EPS):
    """KL(N(m1, v1) || N(m2, v2)) with eps added to both variances.

    Works elementwise on arrays; always >= 0 up to float round-off.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    v1 = np.asarray(v1, dtype=np.float64) + eps
    v2 = np.asarray(v2, dtype=np.float64) + eps
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if np.any(v1 <= 0) or np.any(v2 <= 0):
        raise ValueError("variances must be >= 0")
    return 0.5 * np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / (2.0 * v2) - 0.5


def layer_aiwq(stats: ChannelStatsPair, eps: float = DEFAULT_EPS) -> float:
    """Average the per-channel KL over all output channels of the layer."""
    kl = gaussian_kl(stats.mean_before, stats.var_before,
                     stats.mean_after, stats.var_after, eps=eps)
    return float(kl.mean())


def sample_aiwq(network, data_source: Iterator, iterations: int,
                update: Callable[[object], None],
                eps: float = DEFAULT_EPS) -> AiwqReport:
    """Profile per-layer instability over `iterations` training updates.

    For each sampled batch, a normal training update runs first; then one
    probe forward (batch statistics, no running-stat side effects) captures
    every quantized conv layer's input, and the layer's pre-normalization
    output is computed twice on that same input: once with the quantized
    weights cached from before the update and once with the current ones.
    The per-channel Gaussian KL between the two outputs, averaged over
    channels, is accumulated and finally averaged over iterations.

    `network` must expose `quantized_convs()` (blocks with `layer_id`,
    `quantized_weight()` and `conv_only(x, w)`) and
    `capture_inputs(x) -> dict[layer_id, np.ndarray]`.

    `update` performs one training step on a batch (learning rate per the
    caller's current schedule).
    """
    layers = network.quantized_convs()
    if not layers:
        raise ValueError("network has no quantized conv layers")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    prev_qw = {blk.layer_id: blk.quantized_weight() for blk in layers}
    sums = {blk.layer_id: 0.0 for blk in layers}

    for _ in range(iterations):
        try:
            batch = next(data_source)
        except StopIteration:
            raise ValueError("data source exhausted during sampling") from None
        update(batch)
        inputs = network.capture_inputs(batch[0])
        for blk in layers:
            lid = blk.layer_id
            qw_now = blk.quantized_weight()
            out_before = blk.conv_only(inputs[lid], prev_qw[lid])
            out_after = blk.conv_only(inputs[lid], qw_now)
            mb, vb = channel_stats(out_before)
            ma, va = channel_stats(out_after)
            sums[lid] += layer_aiwq(ChannelStatsPair(mb, vb, ma, va), eps=eps)
            prev_qw[lid] = qw_now

    per_layer = {lid: sums[lid] / iterations for lid in sums}
    return AiwqReport(per_layer=per_layer, iterations_sampled=iterations)
