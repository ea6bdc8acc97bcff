"""Bit-operations cost model and model-size estimate.

BOPS weights each layer's multiply-accumulate count by the product of its
weight and activation bit-widths, a standard proxy for the silicon cost of a
fixed-point accelerator. Model size counts weight-tensor parameters at the
weight bit-width (biases and normalization parameters excluded).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

from .config import NetConfig

__all__ = ["LayerCost", "bops_report", "total_bops", "report_csv"]


@dataclass
class LayerCost:
    layer_id: str
    kind: str
    macs: int
    weight_bits: int
    act_bits: int
    weight_params: int

    @property
    def bops(self) -> int:
        return self.macs * self.weight_bits * self.act_bits

    @property
    def size_bits(self) -> int:
        return self.weight_params * self.weight_bits


def bops_report(net: NetConfig, weight_bits: int, act_bits: int,
                first_layer_act_bits: int | None = None,
                full_precision_bits: int = 64) -> list[LayerCost]:
    """Per-layer MAC counts and bit-operation costs for one input image.

    Quantized layers use (weight_bits, act_bits); unquantized layers are
    costed at `full_precision_bits`. `first_layer_act_bits` overrides the
    first layer's activation width (e.g. 8 for an unquantized input image).
    """
    rows: list[LayerCost] = []
    ch, h, w = net.input_shape
    for i, spec in enumerate(net.blocks):
        if spec.kind == "dense":
            macs = ch * spec.channels
            params = ch * spec.channels
            out_ch = spec.channels
        else:
            groups = ch if spec.kind == "depthwise" else 1
            pad = spec.kernel // 2
            oh = (h + 2 * pad - spec.kernel) // spec.stride + 1
            ow = (w + 2 * pad - spec.kernel) // spec.stride + 1
            per_output = (ch // groups) * spec.kernel * spec.kernel
            macs = oh * ow * spec.channels * per_output
            params = spec.channels * per_output
            out_ch, h, w = spec.channels, oh, ow
        if spec.quantized:
            wb = weight_bits
            ab = act_bits
            if i == 0 and first_layer_act_bits is not None:
                ab = first_layer_act_bits
        else:
            wb = ab = full_precision_bits
        if spec.kind == "dense":
            name = "fc"
        elif spec.kind == "depthwise":
            name = f"dw{i}"
        else:
            name = f"pw{i}" if spec.kernel == 1 else f"conv{i}"
        rows.append(LayerCost(layer_id=name, kind=spec.kind, macs=macs,
                              weight_bits=wb, act_bits=ab, weight_params=params))
        ch = out_ch
    return rows


def total_bops(rows: list[LayerCost]) -> int:
    return sum(r.bops for r in rows)


def report_csv(rows: list[LayerCost]) -> str:
    buf = io.StringIO()
    buf.write("layer_id,kind,macs,weight_bits,act_bits,bops,weight_params,size_bits\n")
    for r in rows:
        buf.write(f"{r.layer_id},{r.kind},{r.macs},{r.weight_bits},{r.act_bits},"
                  f"{r.bops},{r.weight_params},{r.size_bits}\n")
    buf.write(f"TOTAL,,{sum(r.macs for r in rows)},,,{total_bops(rows)},"
              f"{sum(r.weight_params for r in rows)},{sum(r.size_bits for r in rows)}\n")
    return buf.getvalue()
