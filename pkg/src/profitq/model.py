"""Toy depthwise-separable networks with per-layer quantizers and freezing.

A network is a flat list of conv blocks (conv -> batchnorm -> activation)
followed by a global average pool and a dense classifier. Quantizers are
attached per layer when quantization-aware training starts: a symmetric DuQ
on each quantized layer's weights and an activation quantizer (DuQ, PACT, or
QIL) on its input. The first conv's input is the raw image unless explicitly
configured otherwise.

With negative padding on, every conv that consumes h-swish outputs pads with
the h-swish minimum (-0.375) instead of zero, and its input quantizer pins
beta there so -0.375 is exactly the bottom quantization level.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import NetConfig
from .negpad import H_SWISH_MIN
from .quant import DuqQuantizer, PactQuantizer, QilQuantizer
from .tensor import Tensor

__all__ = ["BatchNorm", "ConvBlock", "DenseBlock", "Network", "build_network"]

_ACT_FNS = {"h_swish": T.h_swish, "relu": T.relu, "relu6": T.relu6, "none": None}


class BatchNorm:
    """Per-channel batchnorm state; `mode` picks stats and side effects.

    train: batch stats, running buffers updated.
    probe: batch stats, no side effects (used for calibration/profiling).
    eval:  running stats.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta,
                           self.running_mean, self.running_var,
                           momentum=self.momentum,
                           training=mode in ("train", "probe"),
                           eps=self.eps,
                           update_running=mode == "train")


class ConvBlock:
    def __init__(self, layer_id: str, in_ch: int, out_ch: int, kernel: int,
                 stride: int, groups: int, activation: str, quantized: bool,
                 pad_value: float, rng: np.random.Generator):
        self.layer_id = layer_id
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.padding = kernel // 2
        self.pad_value = pad_value
        self.activation = activation
        self.quantized = quantized
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                        (out_ch, in_ch // groups, kernel, kernel)),
                             requires_grad=True)
        self.bn = BatchNorm(out_ch)
        self.weight_q: DuqQuantizer | None = None
        self.input_q = None
        self.frozen = False
        self.fed_by_h_swish = False

    def forward(self, x: Tensor, mode: str, capture: dict | None = None) -> Tensor:
        if self.input_q is not None:
            x = self.input_q(x)
        if capture is not None:
            capture[self.layer_id] = x.data
        w = self.weight_q(self.weight) if self.weight_q is not None else self.weight
        y = T.conv2d(x, w, stride=self.stride, padding=self.padding,
                     pad_value=self.pad_value, groups=self.groups)
        y = self.bn(y, mode)
        act = _ACT_FNS[self.activation]
        return act(y) if act is not None else y

    def quantized_weight(self) -> np.ndarray:
        if self.weight_q is None:
            return self.weight.data.copy()
        return self.weight_q.apply(self.weight.data)

    def conv_only(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Pre-normalization conv output for a given input and weight."""
        return T.conv2d_raw(x, w, stride=self.stride, padding=self.padding,
                            pad_value=self.pad_value, groups=self.groups)

    def named_params(self):
        out = [(f"{self.layer_id}.weight", self.weight, "weight")]
        out.append((f"{self.layer_id}.bn.gamma", self.bn.gamma, "bn"))
        out.append((f"{self.layer_id}.bn.beta", self.bn.beta, "bn"))
        if self.weight_q is not None:
            out += [(f"{self.layer_id}.wq.{n}", t, "quant")
                    for n, t in self.weight_q.params()]
        if self.input_q is not None:
            out += [(f"{self.layer_id}.aq.{n}", t, "quant")
                    for n, t in self.input_q.params()]
        return out


class DenseBlock:
    def __init__(self, layer_id: str, in_features: int, out_features: int,
                 quantized: bool, rng: np.random.Generator):
        self.layer_id = layer_id
        self.in_features, self.out_features = in_features, out_features
        self.quantized = quantized
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / in_features),
                                        (out_features, in_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self.weight_q: DuqQuantizer | None = None
        self.input_q = None
        self.frozen = False
        self.fed_by_h_swish = False

    def forward(self, x: Tensor, mode: str, capture: dict | None = None) -> Tensor:
        if self.input_q is not None:
            x = self.input_q(x)
        w = self.weight_q(self.weight) if self.weight_q is not None else self.weight
        return T.dense(x, w, self.bias)

    def named_params(self):
        out = [(f"{self.layer_id}.weight", self.weight, "weight"),
               (f"{self.layer_id}.bias", self.bias, "weight")]
        if self.weight_q is not None:
            out += [(f"{self.layer_id}.wq.{n}", t, "quant")
                    for n, t in self.weight_q.params()]
        if self.input_q is not None:
            out += [(f"{self.layer_id}.aq.{n}", t, "quant")
                    for n, t in self.input_q.params()]
        return out


def _make_act_quantizer(kind: str, calibration: np.ndarray, bit: int,
                        beta_pin: float | None):
    if kind == "duq":
        return DuqQuantizer.for_activations(calibration, bit, beta_pin=beta_pin)
    if kind == "pact":
        return PactQuantizer.for_activations(calibration, bit)
    if kind == "qil":
        return QilQuantizer.for_activations(calibration, bit)
    raise ValueError(f"unknown activation quantizer {kind!r}")


class Network:
    """Conv blocks + global pool + dense head built from a NetConfig."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator,
                 negative_padding: bool = True):
        self.cfg = cfg
        self.negative_padding = negative_padding
        self.conv_blocks: list[ConvBlock] = []
        ch = cfg.input_shape[0]
        h = w = cfg.input_shape[1]
        prev_act = "none"  # the image feeds the stem
        for i, spec in enumerate(cfg.blocks[:-1]):
            groups = ch if spec.kind == "depthwise" else 1
            if spec.kind == "depthwise":
                name = f"dw{i}"
            else:
                name = f"pw{i}" if spec.kernel == 1 else f"conv{i}"
            fed_by_h_swish = prev_act == "h_swish"
            pad_value = H_SWISH_MIN if (negative_padding and fed_by_h_swish) else 0.0
            blk = ConvBlock(name, ch, spec.channels, spec.kernel, spec.stride,
                            groups, spec.activation, spec.quantized, pad_value, rng)
            blk.fed_by_h_swish = fed_by_h_swish
            self.conv_blocks.append(blk)
            ch = spec.channels
            h = (h + 2 * (spec.kernel // 2) - spec.kernel) // spec.stride + 1
            w = (w + 2 * (spec.kernel // 2) - spec.kernel) // spec.stride + 1
            prev_act = spec.activation
        if h < 1 or w < 1:
            raise ValueError("network downsamples the input to nothing")
        head_spec = cfg.blocks[-1]
        self.head = DenseBlock("fc", ch, cfg.num_classes, head_spec.quantized, rng)
        self.quantization_enabled = False

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "train",
                capture: dict | None = None) -> Tensor:
        t = Tensor(x)
        for blk in self.conv_blocks:
            t = blk.forward(t, mode, capture)
        t = T.global_avg_pool(t)
        if capture is not None:
            capture[self.head.layer_id] = (t.data if self.head.input_q is None
                                           else self.head.input_q.apply(t.data))
        return self.head.forward(t, mode, capture)

    def capture_inputs(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Probe forward (no side effects) capturing each conv's actual input."""
        capture: dict[str, np.ndarray] = {}
        self.forward(x, mode="probe", capture=capture)
        return capture

    def logits(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        return self.forward(x, mode=mode).data

    # -- parameter access -----------------------------------------------------

    def all_blocks(self):
        return [*self.conv_blocks, self.head]

    def layer_ids(self) -> list[str]:
        return [b.layer_id for b in self.all_blocks()]

    def named_params(self) -> list[tuple[str, Tensor, str, str]]:
        """(name, tensor, kind, layer_id) for every trainable parameter."""
        out = []
        for blk in self.all_blocks():
            for name, t, kind in blk.named_params():
                out.append((name, t, kind, blk.layer_id))
        return out

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t, _, _ in self.named_params()}

    def state_dict(self) -> dict[str, np.ndarray]:
        """All persistent arrays: parameters plus batchnorm running stats."""
        state = dict(self.param_arrays())
        for blk in self.conv_blocks:
            state[f"{blk.layer_id}.bn.running_mean"] = blk.bn.running_mean
            state[f"{blk.layer_id}.bn.running_var"] = blk.bn.running_var
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.state_dict()
        missing = set(state) - set(arrays)
        if missing:
            raise ValueError(f"state missing arrays: {sorted(missing)}")
        for name, dst in state.items():
            src = np.asarray(arrays[name], dtype=np.float64).reshape(dst.shape)
            dst[...] = src

    def quantized_convs(self) -> list[ConvBlock]:
        return [b for b in self.conv_blocks if b.weight_q is not None]

    # -- quantization ---------------------------------------------------------

    def enable_quantization(self, weight_bits: int, act_bits: int | None,
                            calibration: np.ndarray, act_quantizer: str = "duq",
                            first_layer_input_quantized: bool = False,
                            weight_static: bool = False) -> None:
        """Attach quantizers (first phase) or retarget level counts (later).

        Activation quantizers calibrate once from `calibration` (a probe
        forward captures each layer's input); later bit drops keep all learned
        parameters and only change n_lv, since the learned interval stays
        valid when the grid coarsens.
        """
        if self.quantization_enabled:
            self.set_bits(weight_bits, act_bits)
            return
        inputs = self.capture_inputs(calibration)
        for i, blk in enumerate(self.all_blocks()):
            if not blk.quantized:
                continue
            blk.weight_q = DuqQuantizer.for_weights(blk.weight.data, weight_bits,
                                                    static=weight_static)
            skip_input = (i == 0 and not first_layer_input_quantized)
            if act_bits is not None and not skip_input:
                pin = (H_SWISH_MIN if (self.negative_padding and blk.fed_by_h_swish
                                       and act_quantizer == "duq") else None)
                blk.input_q = _make_act_quantizer(act_quantizer,
                                                  inputs[blk.layer_id],
                                                  act_bits, pin)
        self.quantization_enabled = True

    def set_bits(self, weight_bits: int, act_bits: int | None) -> None:
        from .quant import activation_levels, weight_levels
        for blk in self.all_blocks():
            if blk.weight_q is not None:
                blk.weight_q.set_n_lv(weight_levels(weight_bits))
                if blk.weight_q.static:
                    blk.weight_q.static_bit = weight_bits
            if blk.input_q is not None and act_bits is not None:
                blk.input_q.set_n_lv(activation_levels(act_bits))

    # -- freezing ---------------------------------------------------------------

    def freeze_layers(self, layer_ids) -> None:
        """Make the named layers immutable: conv weights and quantizer params
        stop training (batchnorm affine and running stats are unaffected)."""
        by_id = {b.layer_id: b for b in self.all_blocks()}
        for lid in layer_ids:
            if lid not in by_id:
                raise KeyError(f"unknown layer id {lid!r}")
            blk = by_id[lid]
            blk.frozen = True
            for _, t, kind in blk.named_params():
                if kind in ("weight", "quant"):
                    t.requires_grad = False

    def frozen_layer_ids(self) -> list[str]:
        return [b.layer_id for b in self.all_blocks() if b.frozen]

    def quantizer_meta(self) -> dict:
        """Structural description of attached quantizers (for checkpoints)."""
        meta: dict[str, dict] = {}
        for blk in self.all_blocks():
            entry: dict = {}
            if blk.weight_q is not None:
                q = blk.weight_q
                entry["wq"] = {"n_lv": q.n_lv, "mode": q.mode, "static": q.static,
                               "static_bit": q.static_bit}
            if blk.input_q is not None:
                q = blk.input_q
                d = {"kind": q.kind, "n_lv": q.n_lv}
                if q.kind == "duq":
                    d["mode"] = q.mode
                    d["beta_pin"] = q.beta_pin
                entry["aq"] = d
            if entry:
                entry["frozen"] = blk.frozen
                meta[blk.layer_id] = entry
        return meta

    def restore_quantizers(self, meta: dict) -> None:
        """Rebuild quantizer objects from checkpoint metadata (values are
        loaded separately through load_state)."""
        from .quant import PactParams, QuantParams
        by_id = {b.layer_id: b for b in self.all_blocks()}
        for lid, entry in meta.items():
            blk = by_id[lid]
            if "wq" in entry:
                w = entry["wq"]
                params = QuantParams(a=1.0, b=0.0, alpha=1.0, beta=0.0,
                                     n_lv=w["n_lv"], mode=w["mode"])
                blk.weight_q = DuqQuantizer(params, static=w["static"],
                                            static_bit=w["static_bit"])
            if "aq" in entry:
                a = entry["aq"]
                if a["kind"] == "duq":
                    params = QuantParams(a=1.0, b=0.0, alpha=1.0, beta=0.0,
                                         n_lv=a["n_lv"], mode=a["mode"])
                    blk.input_q = DuqQuantizer(params, beta_pin=a["beta_pin"])
                elif a["kind"] == "pact":
                    blk.input_q = PactQuantizer(PactParams(p=1.0, n_lv=a["n_lv"]))
                else:
                    blk.input_q = QilQuantizer(center=0.0, width=1.0, n_lv=a["n_lv"])
            if entry.get("frozen"):
                self.freeze_layers([lid])
        if meta:
            self.quantization_enabled = True


def build_network(cfg: NetConfig, rng: np.random.Generator,
                  negative_padding: bool = True) -> Network:
    return Network(cfg, rng, negative_padding=negative_padding)
