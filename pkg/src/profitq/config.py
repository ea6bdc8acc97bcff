"""Run and network configuration: versioned JSON schema, strict key checking.

Unknown keys are errors so a typo in a hyperparameter name fails loudly
instead of silently training with defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

__all__ = [
    "ConfigError",
    "LayerSpec",
    "NetConfig",
    "BitPhase",
    "ProfitConfig",
    "KdConfig",
    "DataConfig",
    "RunConfig",
    "load_config",
    "parse_config",
    "micro_mobilenet",
]

CONFIG_VERSION = 1

ACTIVATIONS = ("h_swish", "relu", "relu6", "none")
LAYER_KINDS = ("conv", "depthwise", "dense")
ACT_QUANTIZERS = ("duq", "pact", "qil")


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set[str], ctx: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {ctx}: {sorted(unknown)}")


@dataclass
class LayerSpec:
    kind: str
    channels: int
    kernel: int = 3
    stride: int = 1
    activation: str = "h_swish"
    quantized: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.kind != "dense" and (self.kernel < 1 or self.stride < 1):
            raise ConfigError("kernel and stride must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        _check_keys(d, {"kind", "channels", "kernel", "stride", "activation",
                        "quantized"}, "layer spec")
        return cls(**d)


@dataclass
class NetConfig:
    input_shape: tuple[int, int, int]
    num_classes: int
    blocks: list[LayerSpec]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be [C, H, W]")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.blocks:
            raise ConfigError("network needs at least one block")
        if self.blocks[-1].kind != "dense":
            raise ConfigError("last block must be the dense classifier")
        if any(b.kind == "dense" for b in self.blocks[:-1]):
            raise ConfigError("dense block must be last")
        if self.blocks[-1].channels != self.num_classes:
            raise ConfigError("dense classifier channels must equal num_classes")
        # walk shapes front to back; depthwise keeps its channel count
        ch = self.input_shape[0]
        for b in self.blocks[:-1]:
            if b.kind == "depthwise" and b.channels != ch:
                raise ConfigError(
                    f"depthwise block declares {b.channels} channels but input has {ch}")
            ch = b.channels

    def quantized_layer_count(self) -> int:
        return sum(1 for b in self.blocks if b.quantized)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        _check_keys(d, {"input_shape", "num_classes", "blocks"}, "net config")
        blocks = [LayerSpec.from_dict(b) for b in d.get("blocks", [])]
        return cls(input_shape=d["input_shape"], num_classes=d["num_classes"],
                   blocks=blocks)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "blocks": [vars(b).copy() for b in self.blocks]}


@dataclass
class BitPhase:
    weight_bits: int
    act_bits: int
    epochs: int

    def __post_init__(self):
        for bits in (self.weight_bits, self.act_bits):
            if not 2 <= bits <= 8:
                raise ConfigError(f"bit width {bits} outside [2, 8]")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "BitPhase":
        _check_keys(d, {"weight_bits", "act_bits", "epochs"}, "bit phase")
        return cls(**d)


@dataclass
class ProfitConfig:
    n_profit: int = 3
    epochs_per_stage: int = 2
    bn_epochs: int = 2
    sample_iterations: int = 16

    def __post_init__(self):
        if self.n_profit < 1:
            raise ConfigError("n_profit must be >= 1")
        if self.epochs_per_stage < 1 or self.bn_epochs < 0:
            raise ConfigError("bad PROFIT epoch counts")
        if self.sample_iterations < 1:
            raise ConfigError("sample_iterations must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ProfitConfig":
        _check_keys(d, {"n_profit", "epochs_per_stage", "bn_epochs",
                        "sample_iterations"}, "profit config")
        return cls(**d)


@dataclass
class KdConfig:
    teacher_checkpoint: str
    temperature: float = 4.0
    weight: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigError("kd weight must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "KdConfig":
        _check_keys(d, {"teacher_checkpoint", "temperature", "weight"}, "kd config")
        return cls(**d)


@dataclass
class DataConfig:
    kind: str = "synth"
    seed: int = 0
    n_train: int = 2048
    n_test: int = 1024
    image_size: int = 16
    channels: int = 1
    noise: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.kind not in ("synth", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "idx" and not all((self.train_images, self.train_labels,
                                           self.test_images, self.test_labels)):
            raise ConfigError("idx data needs all four file paths")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _check_keys(d, {"kind", "seed", "n_train", "n_test", "image_size",
                        "channels", "noise", "train_images", "train_labels",
                        "test_images", "test_labels"}, "data config")
        return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    batch_size: int = 32
    warm_epochs: int = 0
    bit_schedule: list[BitPhase] = field(default_factory=list)
    profit: ProfitConfig | None = None
    base_lr: float = 0.05
    warmup_epochs: int = 1
    finetune_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    ema_decay: float = 0.95
    kd: KdConfig | None = None
    first_layer_input_quantized: bool = False
    negative_padding: bool = True
    act_quantizer: str = "duq"
    weight_quantizer_static: bool = False
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")
        if self.act_quantizer not in ACT_QUANTIZERS:
            raise ConfigError(f"unknown act_quantizer {self.act_quantizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr < 0 or self.finetune_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        prev = (9, 9)
        for ph in self.bit_schedule:
            cur = (ph.weight_bits, ph.act_bits)
            if cur[0] > prev[0] or cur[1] > prev[1]:
                raise ConfigError("bit widths must be non-increasing across phases")
            prev = cur

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, {"seed", "batch_size", "warm_epochs", "bit_schedule",
                        "profit", "base_lr", "warmup_epochs", "finetune_lr",
                        "momentum", "weight_decay", "ema_decay", "kd",
                        "first_layer_input_quantized", "negative_padding",
                        "act_quantizer", "weight_quantizer_static", "data"},
                    "run config")
        kw: dict[str, Any] = dict(d)
        if "bit_schedule" in kw:
            kw["bit_schedule"] = [BitPhase.from_dict(p) for p in kw["bit_schedule"]]
        if kw.get("profit") is not None:
            kw["profit"] = ProfitConfig.from_dict(kw["profit"])
        if kw.get("kd") is not None:
            kw["kd"] = KdConfig.from_dict(kw["kd"])
        if "data" in kw:
            kw["data"] = DataConfig.from_dict(kw["data"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "batch_size": self.batch_size,
             "warm_epochs": self.warm_epochs,
             "bit_schedule": [vars(p).copy() for p in self.bit_schedule],
             "profit": None if self.profit is None else vars(self.profit).copy(),
             "base_lr": self.base_lr, "warmup_epochs": self.warmup_epochs,
             "finetune_lr": self.finetune_lr, "momentum": self.momentum,
             "weight_decay": self.weight_decay, "ema_decay": self.ema_decay,
             "kd": None if self.kd is None else vars(self.kd).copy(),
             "first_layer_input_quantized": self.first_layer_input_quantized,
             "negative_padding": self.negative_padding,
             "act_quantizer": self.act_quantizer,
             "weight_quantizer_static": self.weight_quantizer_static,
             "data": vars(self.data).copy()}
        return d


def parse_config(doc: dict) -> tuple[NetConfig, RunConfig]:
    _check_keys(doc, {"version", "net", "run"}, "config")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} "
                          f"(expected {CONFIG_VERSION})")
    if "net" not in doc or "run" not in doc:
        raise ConfigError("config needs 'net' and 'run' sections")
    net = NetConfig.from_dict(doc["net"])
    run = RunConfig.from_dict(doc["run"])
    if run.bit_schedule and net.quantized_layer_count() == 0:
        raise ConfigError("QAT run requires at least one quantized layer")
    return net, run


def load_config(path: str) -> tuple[NetConfig, RunConfig]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return parse_config(doc)


def dump_config(net: NetConfig, run: RunConfig) -> dict:
    return {"version": CONFIG_VERSION, "net": net.to_dict(), "run": run.to_dict()}


def micro_mobilenet(num_classes: int = 10, in_channels: int = 1,
                    image_size: int = 16, stem_channels: int = 8,
                    block_channels: tuple[int, ...] = (16, 32),
                    activation: str = "h_swish") -> NetConfig:
    """Toy depthwise-separable network: stem conv, K separable blocks with a
    stride-2 depthwise at each stage, global pool, dense classifier.

    Depthwise layers have few accumulations per output, which is exactly
    where weight-quantization instability bites hardest, so even this small
    zoo exercises the interesting regime.
    """
    blocks = [LayerSpec(kind="conv", channels=stem_channels, kernel=3, stride=2,
                        activation=activation)]
    ch = stem_channels
    for i, out_ch in enumerate(block_channels):
        stride = 2 if i % 2 == 1 else 1
        blocks.append(LayerSpec(kind="depthwise", channels=ch, kernel=3,
                                stride=stride, activation=activation))
        blocks.append(LayerSpec(kind="conv", channels=out_ch, kernel=1,
                                stride=1, activation=activation))
        ch = out_ch
    blocks.append(LayerSpec(kind="dense", channels=num_classes,
                            activation="none"))
    return NetConfig(input_shape=(in_channels, image_size, image_size),
                     num_classes=num_classes, blocks=blocks)
