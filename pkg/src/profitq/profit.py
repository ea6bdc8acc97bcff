"""Progressive-freezing training orchestration.

After quantization-aware training reaches the target bit-width, layers are
profiled for activation instability, sorted descending, and frozen in stages:
train, freeze the most unstable chunk, train the rest, freeze the next chunk,
and so on until every quantized conv layer is immutable. A final stage then
trains only the normalization layers (affine parameters plus running stats)
so their statistics settle against the now-fixed weights.

Freezing is literal: the layer's learning rate goes to zero, its momentum
velocity is cleared, and its quantizer parameters freeze with it, so the
parameters are bitwise constant from that step on.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .aiwq import AiwqReport
from .config import BitPhase

__all__ = [
    "FreezeSchedule",
    "BitSchedule",
    "StageLogRow",
    "build_schedule",
    "apply_freeze",
    "run_profit",
    "run_progressive",
    "stage_log_csv",
]


@dataclass
class FreezeSchedule:
    """Ordered partition of the quantized layers into freezing stages."""

    stages: list[list[str]]
    epochs_per_stage: int
    bn_epochs: int

    def __post_init__(self):
        seen: set[str] = set()
        for stage in self.stages:
            for lid in stage:
                if lid in seen:
                    raise ValueError(f"layer {lid!r} appears in two stages")
                seen.add(lid)
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")
        if self.bn_epochs < 0:
            raise ValueError("bn_epochs must be >= 0")

    def all_layers(self) -> list[str]:
        return [lid for stage in self.stages for lid in stage]

    def total_epochs(self) -> int:
        return len(self.stages) * self.epochs_per_stage + self.bn_epochs


@dataclass
class BitSchedule:
    """Progressive bit-width phases; widths may only stay or shrink."""

    phases: list[BitPhase]

    def __post_init__(self):
        prev = (9, 9)
        for ph in self.phases:
            if ph.weight_bits > prev[0] or ph.act_bits > prev[1]:
                raise ValueError("bit widths must be non-increasing across phases")
            prev = (ph.weight_bits, ph.act_bits)

    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)


@dataclass
class StageLogRow:
    stage: str
    frozen_layers: str
    train_acc: float
    test_acc: float
    mean_aiwq: float


def stage_log_csv(rows: list[StageLogRow]) -> str:
    buf = io.StringIO()
    buf.write("stage,frozen_layers,train_acc,test_acc,mean_AIWQ\n")
    for r in rows:
        buf.write(f"{r.stage},{r.frozen_layers},{r.train_acc!r},"
                  f"{r.test_acc!r},{r.mean_aiwq!r}\n")
    return buf.getvalue()


def build_schedule(report: AiwqReport, n_profit: int, epochs_per_stage: int,
                   bn_epochs: int) -> FreezeSchedule:
    """Split the instability ranking into n_profit equal freezing stages.

    Layers are ordered by metric descending (ties break front-to-back in
    network order); each stage gets floor(N/n_profit) layers and the
    remainder lands in the last stage.
    """
    ranked = [lid for lid, _ in report.ranked()]
    n_layers = len(ranked)
    if not 1 <= n_profit <= n_layers:
        raise ValueError(f"n_profit must be in [1, {n_layers}], got {n_profit}")
    base = n_layers // n_profit
    stages = [ranked[i * base:(i + 1) * base] for i in range(n_profit - 1)]
    stages.append(ranked[(n_profit - 1) * base:])
    return FreezeSchedule(stages=stages, epochs_per_stage=epochs_per_stage,
                          bn_epochs=bn_epochs)


def apply_freeze(network, layer_ids, optimizer=None) -> None:
    """Zero the layers' learning rate forever and clear their momentum.

    Quantizer parameters freeze with their layer. Batchnorm affine parameters
    and running statistics are not touched (neither these layers' nor others').
    """
    known = set(network.layer_ids())
    frozen = set(network.frozen_layer_ids())
    for lid in layer_ids:
        if lid not in known:
            raise KeyError(f"unknown layer id {lid!r}")
        if lid in frozen:
            raise ValueError(f"layer {lid!r} is already frozen")
    network.freeze_layers(layer_ids)
    if optimizer is not None:
        for lid in layer_ids:
            optimizer.clear_velocity(lid)


def run_profit(trainer, schedule: FreezeSchedule,
               report: AiwqReport | None = None) -> list[StageLogRow]:
    """Execute the freezing stages followed by the normalization-only stage.

    The first training block runs with nothing frozen yet (the initial
    unfrozen stage); each block is followed by freezing the next chunk of the
    schedule. Exactly len(stages)*epochs_per_stage + bn_epochs epochs run in
    total. The trainer must expose train_epochs/evaluate/network/optimizer
    and save_checkpoint.
    """
    rows: list[StageLogRow] = []
    metric = report.per_layer if report is not None else {}
    for n, stage_ids in enumerate(schedule.stages):
        trainer.train_epochs(schedule.epochs_per_stage, tag=f"profit{n}")
        apply_freeze(trainer.network, stage_ids, trainer.optimizer)
        train_acc = trainer.evaluate(split="train")[0]
        test_acc = trainer.evaluate(split="test")[0]
        stage_metric = (sum(metric.get(lid, 0.0) for lid in stage_ids)
                        / max(len(stage_ids), 1))
        rows.append(StageLogRow(stage=f"profit{n}",
                                frozen_layers=" ".join(stage_ids),
                                train_acc=train_acc, test_acc=test_acc,
                                mean_aiwq=stage_metric))
        trainer.save_checkpoint(f"stage{n}")
    if schedule.bn_epochs > 0:
        trainer.train_epochs(schedule.bn_epochs, bn_only=True, tag="bn_final")
        rows.append(StageLogRow(stage="bn_final",
                                frozen_layers=" ".join(schedule.all_layers()),
                                train_acc=trainer.evaluate(split="train")[0],
                                test_acc=trainer.evaluate(split="test")[0],
                                mean_aiwq=0.0))
        trainer.save_checkpoint("bn_final")
    return rows


def run_progressive(trainer, schedule: BitSchedule) -> None:
    """Step the quantizers down phase by phase, training between drops.

    The first phase attaches and calibrates quantizers; later phases only
    retarget level counts (already-learned intervals stay valid), so a
    single-phase schedule is plain quantization-aware training.
    """
    for phase in schedule.phases:
        trainer.activate_bits(phase.weight_bits, phase.act_bits)
        trainer.train_epochs(phase.epochs,
                             tag=f"w{phase.weight_bits}a{phase.act_bits}")
        trainer.save_checkpoint(f"w{phase.weight_bits}a{phase.act_bits}")
