"""Self-describing binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the concatenated tensor payload as little-endian float64. The header
carries the format version, training step, RNG state, both config sections,
quantizer structure, and the name -> (shape, offset) table, so a checkpoint
alone is enough to rebuild the network and reproduce evaluations bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import NetConfig, RunConfig
from .model import Network, build_network

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"PFQCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    format_version: int
    step: int
    epochs_run: int
    rng_state: dict
    net: NetConfig
    run: RunConfig
    quantizers: dict
    arrays: dict[str, np.ndarray]

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("ema.")}

    def ema_arrays(self) -> dict[str, np.ndarray]:
        return {k[len("ema."):]: v for k, v in self.arrays.items()
                if k.startswith("ema.")}

    def build_network(self) -> Network:
        """Reconstruct the network with quantizers and loaded parameters."""
        rng = np.random.Generator(np.random.PCG64(0))  # init is overwritten
        net = build_network(self.net, rng,
                            negative_padding=self.run.negative_padding)
        net.restore_quantizers(self.quantizers)
        net.load_state(self.model_arrays())
        return net


def save_checkpoint(path: str, network: Network, net_cfg: NetConfig,
                    run_cfg: RunConfig, rng_state: dict, step: int,
                    epochs_run: int,
                    ema_shadow: dict[str, np.ndarray] | None = None) -> None:
    arrays = dict(network.state_dict())
    if ema_shadow is not None:
        for name, arr in ema_shadow.items():
            arrays[f"ema.{name}"] = arr

    names = sorted(arrays)
    table: dict[str, dict] = {}
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        table[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 8

    header = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "epochs_run": int(epochs_run),
        "rng_state": rng_state,
        "net": net_cfg.to_dict(),
        "run": run_cfg.to_dict(),
        "quantizers": network.quantizer_meta(),
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    body_start = len(MAGIC) + 8
    if len(raw) < body_start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[body_start:body_start + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header JSON") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')!r}")

    data_start = body_start + header_len
    arrays: dict[str, np.ndarray] = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + meta["offset"]
        end = start + count * 8
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor payload for {name}")
        arr = np.frombuffer(raw[start:end], dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(shape)

    return Checkpoint(
        format_version=header["format_version"],
        step=header["step"],
        epochs_run=header["epochs_run"],
        rng_state=header["rng_state"],
        net=NetConfig.from_dict(header["net"]),
        run=RunConfig.from_dict(header["run"]),
        quantizers=header["quantizers"],
        arrays=arrays,
    )
