"""Training pipelines: full-precision warm training, progressive bit-width
reduction, instability-guided freezing, EMA evaluation, logging, checkpoints.

The LR plan is cosine-with-warmup for the full-precision warm phase and a
constant fine-tuning rate for every quantized segment, so the progressive
phases and the freezing stages see the same step sizes and instability regime
regardless of how many segments the run is split into.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aiwq import AiwqReport, sample_aiwq
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import NetConfig, RunConfig, dump_config
from .data import Dataset, batches, load_idx_dataset, split_dataset, synth_dataset
from .model import Network, build_network
from .optim import EmaState, SgdState, cosine_lr, ema_update, sgd_step
from .profit import BitSchedule, build_schedule, run_profit, run_progressive, stage_log_csv
from .tensor import Tensor

__all__ = [
    "TrainingDiverged",
    "LayerOptimizer",
    "Trainer",
    "kd_loss",
    "evaluate_network",
    "evaluate_checkpoint",
    "train",
]


class TrainingDiverged(RuntimeError):
    pass


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray,
            labels: np.ndarray, temperature: float, weight: float) -> Tensor:
    """Distillation loss: weight * T^2 * CE(softmax(teacher/T), student/T)
    plus (1 - weight) * CE(labels, student)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not 0.0 <= weight <= 1.0:
        raise ValueError("kd weight must be in [0, 1]")
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError("student/teacher logit shapes differ")

    hard = T.softmax_cross_entropy(student_logits, labels)
    if weight == 0.0:
        return hard
    n = student_logits.shape[0]
    t_scaled = teacher_logits / temperature
    t_scaled = t_scaled - t_scaled.max(axis=1, keepdims=True)
    t_prob = np.exp(t_scaled)
    t_prob /= t_prob.sum(axis=1, keepdims=True)
    s_log = T.log_softmax(student_logits * (1.0 / temperature))
    soft = T.tensor_sum(T.mul(s_log, Tensor(t_prob))) * (-1.0 / n)
    return soft * (weight * temperature ** 2) + hard * (1.0 - weight)


class LayerOptimizer:
    """Momentum SGD with one parameter group per layer.

    Velocities are keyed by parameter name so groups survive quantizers being
    attached mid-run. Frozen layers are skipped entirely; clear_velocity makes
    a freeze irreversible even if a learning rate is later restored.
    """

    def __init__(self, network: Network, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.network = network
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, lr: float, bn_only: bool = False) -> None:
        by_layer: dict[str, list] = {}
        for name, t, kind, lid in self.network.named_params():
            if not t.requires_grad or t.grad is None:
                continue
            if bn_only and kind != "bn":
                continue
            by_layer.setdefault(lid, []).append((name, t, kind))
        for lid, entries in by_layer.items():
            params, grads, vels = [], [], []
            for name, t, kind in entries:
                g = t.grad
                if self.weight_decay and kind == "weight":
                    g = g + self.weight_decay * t.data
                v = self.velocities.get(name)
                if v is None:
                    v = self.velocities[name] = np.zeros_like(t.data)
                params.append(t.data)
                grads.append(g)
                vels.append(v)
            sgd_step(params, grads,
                     SgdState(lr=lr, momentum=self.momentum, velocity=vels))

    def clear_velocity(self, layer_id: str) -> None:
        prefix = f"{layer_id}."
        for name, v in self.velocities.items():
            if name.startswith(prefix):
                v[...] = 0.0


def _top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    k = min(k, logits.shape[1])
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return (top == labels[:, None]).any(axis=1)


def evaluate_network(network: Network, ds: Dataset,
                     batch_size: int = 256) -> tuple[float, float]:
    """Deterministic top-1/top-5 accuracy over the full split, BN in eval mode."""
    hits1 = hits5 = 0
    for x, y in batches(ds, batch_size, rng=None):
        logits = network.logits(x, mode="eval")
        hits1 += int((logits.argmax(axis=1) == y).sum())
        hits5 += int(_top_k_hits(logits, y, 5).sum())
    n = len(ds)
    return hits1 / n, hits5 / n


@dataclass
class EpochLog:
    tag: str
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_top1: float
    test_top1_ema: float
    test_top5_ema: float


def _metrics_csv(rows: list[EpochLog]) -> str:
    buf = io.StringIO()
    buf.write("tag,epoch,lr,train_loss,train_acc,test_top1,test_top1_ema,test_top5_ema\n")
    for r in rows:
        buf.write(f"{r.tag},{r.epoch},{r.lr!r},{r.train_loss!r},{r.train_acc!r},"
                  f"{r.test_top1!r},{r.test_top1_ema!r},{r.test_top5_ema!r}\n")
    return buf.getvalue()


def _build_datasets(run: RunConfig, num_classes: int) -> tuple[Dataset, Dataset]:
    d = run.data
    if d.kind == "synth":
        full = synth_dataset(d.seed, num_classes=num_classes,
                             n=d.n_train + d.n_test, image_size=d.image_size,
                             channels=d.channels, noise=d.noise)
        return split_dataset(full, d.n_train)
    return (load_idx_dataset(d.train_images, d.train_labels),
            load_idx_dataset(d.test_images, d.test_labels))


class Trainer:
    """Owns one training run: network, data, optimizer, EMA, logs, run dir."""

    def __init__(self, net_cfg: NetConfig, run_cfg: RunConfig,
                 run_dir: str | None = None, verbose: bool = False):
        self.net_cfg = net_cfg
        self.run = run_cfg
        self.run_dir = run_dir
        self.verbose = verbose
        self.rng = np.random.Generator(np.random.PCG64(run_cfg.seed))
        self.train_data, self.test_data = _build_datasets(run_cfg,
                                                          net_cfg.num_classes)
        self.network = build_network(net_cfg, self.rng,
                                     negative_padding=run_cfg.negative_padding)
        self.optimizer = LayerOptimizer(self.network, momentum=run_cfg.momentum,
                                        weight_decay=run_cfg.weight_decay)
        self.ema = EmaState.from_params(run_cfg.ema_decay,
                                        self.network.param_arrays())
        self.teacher: Network | None = None
        if run_cfg.kd is not None:
            ck = load_checkpoint(run_cfg.kd.teacher_checkpoint)
            self.teacher = ck.build_network()
            for _, t, _, _ in self.teacher.named_params():
                t.requires_grad = False
        self.logs: list[EpochLog] = []
        self.epochs_run = 0
        self.step_count = 0
        self.sampling_steps = 0
        self.current_lr = run_cfg.base_lr
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as f:
                json.dump(dump_config(net_cfg, run_cfg), f, indent=2, sort_keys=True)

    # -- core step ------------------------------------------------------------

    def _loss(self, x: np.ndarray, y: np.ndarray) -> tuple[Tensor, np.ndarray]:
        logits = self.network.forward(x, mode="train")
        if self.teacher is not None and self.run.kd is not None:
            t_logits = self.teacher.logits(x, mode="eval")
            loss = kd_loss(logits, t_logits, y, self.run.kd.temperature,
                           self.run.kd.weight)
        else:
            loss = T.softmax_cross_entropy(logits, y)
        return loss, logits.data

    def _step(self, batch, lr: float, bn_only: bool = False) -> tuple[float, float]:
        x, y = batch
        for _, t, _, _ in self.network.named_params():
            t.zero_grad()
        loss, logits = self._loss(x, y)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"loss diverged at step {self.step_count} (lr={lr:.3g})")
        loss.backward()
        self.optimizer.step(lr, bn_only=bn_only)
        ema_update(self.ema, self.network.param_arrays())
        self.step_count += 1
        acc = float((logits.argmax(axis=1) == y).mean())
        return value, acc

    def sampling_update(self, batch) -> None:
        """One normal training update at the current schedule LR (used while
        profiling instability)."""
        self._step(batch, self.current_lr)
        self.sampling_steps += 1

    # -- segments ---------------------------------------------------------------

    def train_epochs(self, epochs: int, tag: str = "train",
                     bn_only: bool = False, base_lr: float | None = None,
                     warmup_epochs: int = 0, schedule: str = "const") -> None:
        if epochs == 0:
            return
        steps_per_epoch = max(1, -(-len(self.train_data) // self.run.batch_size))
        total = epochs * steps_per_epoch
        warmup = min(warmup_epochs * steps_per_epoch, total - 1)
        lr0 = self.run.finetune_lr if base_lr is None else base_lr
        seg_step = 0
        for e in range(epochs):
            losses, accs = [], []
            for batch in batches(self.train_data, self.run.batch_size, self.rng):
                if schedule == "cosine":
                    lr = cosine_lr(seg_step, total, warmup, lr0)
                else:
                    lr = lr0
                self.current_lr = lr
                loss, acc = self._step(batch, lr, bn_only=bn_only)
                losses.append(loss)
                accs.append(acc)
                seg_step += 1
            self.epochs_run += 1
            top1_raw, _ = self.evaluate(split="test", use_ema=False)
            top1_ema, top5_ema = self.evaluate(split="test", use_ema=True)
            row = EpochLog(tag=tag, epoch=self.epochs_run, lr=self.current_lr,
                           train_loss=float(np.mean(losses)),
                           train_acc=float(np.mean(accs)),
                           test_top1=top1_raw, test_top1_ema=top1_ema,
                           test_top5_ema=top5_ema)
            self.logs.append(row)
            if self.verbose:
                print(f"[{tag}] epoch {self.epochs_run} lr {row.lr:.4g} "
                      f"loss {row.train_loss:.4f} acc {row.train_acc:.3f} "
                      f"test {row.test_top1:.3f} ema {row.test_top1_ema:.3f}")
        self._flush_metrics()

    def activate_bits(self, weight_bits: int, act_bits: int | None) -> None:
        """Attach or retarget quantizers; calibration uses the first training
        images in dataset order so every arm of an ablation sees the same
        calibration batch."""
        calib = self.train_data.images[:self.run.batch_size]
        already = self.network.quantization_enabled
        self.network.enable_quantization(
            weight_bits, act_bits, calib,
            act_quantizer=self.run.act_quantizer,
            first_layer_input_quantized=self.run.first_layer_input_quantized,
            weight_static=self.run.weight_quantizer_static)
        if not already:
            for name, arr in self.network.param_arrays().items():
                if name not in self.ema.shadow:
                    self.ema.shadow[name] = arr.copy()

    def sample_aiwq(self, iterations: int) -> AiwqReport:
        stream = self._infinite_batches()
        return sample_aiwq(self.network, stream, iterations,
                           update=self.sampling_update)

    def _infinite_batches(self):
        while True:
            yield from batches(self.train_data, self.run.batch_size, self.rng)

    # -- evaluation ---------------------------------------------------------------

    def evaluate(self, split: str = "test", use_ema: bool = True) -> tuple[float, float]:
        ds = self.test_data if split == "test" else self.train_data
        if not use_ema:
            return evaluate_network(self.network, ds)
        arrays = self.network.param_arrays()
        saved = {k: v.copy() for k, v in arrays.items()}
        for k, v in arrays.items():
            v[...] = self.ema.shadow[k]
        try:
            return evaluate_network(self.network, ds)
        finally:
            for k, v in arrays.items():
                v[...] = saved[k]

    # -- persistence ---------------------------------------------------------------

    def save_checkpoint(self, name: str) -> str | None:
        if not self.run_dir:
            return None
        path = os.path.join(self.run_dir, f"ckpt_{name}.bin")
        save_checkpoint(path, self.network, self.net_cfg, self.run,
                        rng_state=self.rng.bit_generator.state,
                        step=self.step_count, epochs_run=self.epochs_run,
                        ema_shadow=self.ema.shadow)
        return path

    def _flush_metrics(self) -> None:
        if not self.run_dir:
            return
        with open(os.path.join(self.run_dir, "metrics.csv"), "w", encoding="utf-8") as f:
            f.write(_metrics_csv(self.logs))

    @classmethod
    def resume(cls, ckpt: Checkpoint | str, run_dir: str | None = None,
               run_override: RunConfig | None = None,
               verbose: bool = False) -> "Trainer":
        """Rebuild a trainer from a checkpoint: parameters, quantizers, EMA
        shadows, and RNG state (optimizer velocity restarts at zero)."""
        if isinstance(ckpt, str):
            ckpt = load_checkpoint(ckpt)
        run_cfg = run_override if run_override is not None else ckpt.run
        t = cls(ckpt.net, run_cfg, run_dir=run_dir, verbose=verbose)
        t.network.restore_quantizers(ckpt.quantizers)
        t.network.load_state(ckpt.model_arrays())
        t.ema = EmaState.from_params(run_cfg.ema_decay, t.network.param_arrays())
        for name, arr in ckpt.ema_arrays().items():
            t.ema.shadow[name] = arr.copy()
        t.rng.bit_generator.state = ckpt.rng_state
        t.step_count = ckpt.step
        t.epochs_run = ckpt.epochs_run
        return t

    # -- full pipeline ---------------------------------------------------------------

    def configured_epoch_budget(self) -> int:
        budget = self.run.warm_epochs + sum(p.epochs for p in self.run.bit_schedule)
        if self.run.profit is not None:
            n_layers = len([b for b in self.net_cfg.blocks
                            if b.quantized and b.kind != "dense"])
            n = min(self.run.profit.n_profit, n_layers)
            budget += n * self.run.profit.epochs_per_stage + self.run.profit.bn_epochs
        return budget

    def run_pipeline(self) -> dict:
        """Warm training, progressive quantization, then freezing stages."""
        if self.run.warm_epochs:
            self.train_epochs(self.run.warm_epochs, tag="fp",
                              base_lr=self.run.base_lr,
                              warmup_epochs=self.run.warmup_epochs,
                              schedule="cosine")
        report = None
        stage_rows = None
        if self.run.bit_schedule:
            run_progressive(self, BitSchedule(self.run.bit_schedule))
            if self.run.profit is not None:
                pc = self.run.profit
                report = self.sample_aiwq(pc.sample_iterations)
                if self.run_dir:
                    with open(os.path.join(self.run_dir, "aiwq.csv"), "w",
                              encoding="utf-8") as f:
                        f.write(report.to_csv())
                n_layers = len(self.network.quantized_convs())
                schedule = build_schedule(report, min(pc.n_profit, n_layers),
                                          pc.epochs_per_stage, pc.bn_epochs)
                stage_rows = run_profit(self, schedule, report)
                if self.run_dir:
                    with open(os.path.join(self.run_dir, "stages.csv"), "w",
                              encoding="utf-8") as f:
                        f.write(stage_log_csv(stage_rows))
        self._flush_metrics()
        final = self.save_checkpoint("final")
        top1, top5 = self.evaluate(split="test", use_ema=True)
        return {"test_top1": top1, "test_top5": top5,
                "epochs_run": self.epochs_run, "checkpoint": final,
                "aiwq": report, "stages": stage_rows}


def train(net_cfg: NetConfig, run_cfg: RunConfig, run_dir: str | None = None,
          verbose: bool = False) -> tuple[Trainer, dict]:
    trainer = Trainer(net_cfg, run_cfg, run_dir=run_dir, verbose=verbose)
    summary = trainer.run_pipeline()
    return trainer, summary


def evaluate_checkpoint(ckpt: Checkpoint | str, ds: Dataset,
                        use_ema: bool = False) -> tuple[float, float]:
    """Top-1/top-5 of a stored model over a dataset, optionally with EMA weights."""
    if isinstance(ckpt, str):
        ckpt = load_checkpoint(ckpt)
    net = ckpt.build_network()
    if use_ema:
        arrays = net.param_arrays()
        shadow = ckpt.ema_arrays()
        for k, v in arrays.items():
            if k in shadow:
                v[...] = shadow[k]
    return evaluate_network(net, ds)
