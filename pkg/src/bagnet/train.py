"""SGD-with-momentum training loop, step-decay schedule, evaluation and
bit-exact checkpointing.

Defaults mirror the reference recipe (momentum 0.9, lr0 0.01, decay by
10) with the schedule lengths scaled down to desk size (batch 64, 20
epochs, decay every 8). Every random draw is keyed by (seed, epoch,
purpose), so resuming from a checkpoint reproduces the uninterrupted
run bit for bit.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import (
    NumericalError,
    Tensor,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from .data import AugmentSpec, Dataset, batch_iterator, channel_stats, normalize_images
from .model import BagNetConfig, BlockSpec, ConfigError, ModelState, build_model, forward_logits

CHECKPOINT_MAGIC = b"BAGC"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Corrupt or incompatible checkpoint payload."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr0: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 10.0
    decay_every_epochs: int = 8
    seed: int = 0
    augment: Optional[AugmentSpec] = None

    def __post_init__(self):
        if self.lr0 <= 0 and self.lr0 != 0.0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be > 1")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 / decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 / config.decay_factor ** (epoch // config.decay_every_epochs)


@dataclass
class Checkpoint:
    config: BagNetConfig
    tensors: dict[str, np.ndarray]   # params, momenta, bn stats, input norm
    epoch: int                       # epochs completed
    base_seed: int
    history: list[dict] = field(default_factory=list)
    diverged: bool = False


@dataclass
class EvalResult:
    topk_accuracy: float
    per_class: np.ndarray            # [num_classes]
    logits: np.ndarray               # [count, num_classes] float32
    k: int


# ---------------------------------------------------------------------------
# evaluation

def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """label among the k largest logits; ties ranked by lower class index."""
    order = np.argsort(-logits, axis=1, kind="stable")  # stable: ties -> lower index first
    return (order[:, :k] == labels[:, None]).any(axis=1)


def evaluate(model: ModelState, dataset: Dataset, k: int = 1,
             batch_size: int = 256) -> EvalResult:
    if model.mode != "eval":
        raise ConfigError("evaluate requires eval mode")
    if k > dataset.num_classes:
        raise ValueError(f"k={k} exceeds {dataset.num_classes} classes")
    chunks = []
    for start in range(0, dataset.count, batch_size):
        raw = dataset.images[start:start + batch_size]
        x = normalize_images(raw, model.norm_mean, model.norm_std)
        chunks.append(forward_logits(model, Tensor(x)).data)
    logits = np.concatenate(chunks)
    labels = dataset.labels.astype(np.int64)
    hits = topk_hits(logits, labels, k)
    per_class = np.zeros(dataset.num_classes)
    for c in range(dataset.num_classes):
        mask = labels == c
        per_class[c] = hits[mask].mean() if mask.any() else 0.0
    return EvalResult(float(hits.mean()), per_class, logits, k)


# ---------------------------------------------------------------------------
# training

def train(model: ModelState, train_set: Dataset, val_set: Dataset,
          config: TrainConfig, sink: Optional[Callable[[dict], None]] = None,
          start_epoch: int = 0, history: Optional[list[dict]] = None) -> Checkpoint:
    """Minimize softmax cross-entropy for config.epochs epochs.

    Emits one metrics dict per epoch through `sink`; on divergence (any
    non-finite value) aborts and returns the last completed epoch's
    state with `diverged` set.
    """
    if train_set.num_classes != model.config.num_classes:
        raise ConfigError("model and dataset class counts differ")
    if start_epoch == 0:
        model.norm_mean, model.norm_std = channel_stats(train_set)
    stats = (model.norm_mean, model.norm_std)
    history = list(history or [])
    last_good = snapshot_tensors(model)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(config, epoch)
        model.train_mode()
        running_loss, batches = 0.0, 0
        try:
            for x, y in batch_iterator(train_set, config.batch_size, config.seed,
                                       epoch, stats, config.augment):
                loss = softmax_cross_entropy(forward_logits(model, Tensor(x)), y)
                model.zero_grad()
                loss.backward()
                sgd_momentum_step(model.parameters(), lr, config.momentum)
                running_loss += loss.item()
                batches += 1
        except NumericalError:
            ckpt = Checkpoint(model.config, last_good, epoch, config.seed, history,
                              diverged=True)
            restore_tensors(model, last_good)
            model.eval_mode()
            return ckpt
        model.eval_mode()
        val = evaluate(model, val_set, k=1)
        row = {"epoch": epoch, "lr": lr, "train_loss": running_loss / max(batches, 1),
               "val_top1": val.topk_accuracy}
        history.append(row)
        if sink is not None:
            sink(row)
        last_good = snapshot_tensors(model)

    return Checkpoint(model.config, last_good, config.epochs, config.seed, history)


# ---------------------------------------------------------------------------
# model state <-> flat tensor table

def snapshot_tensors(model: ModelState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        out[f"param.{name}"] = p.value.data.copy()
        out[f"momentum.{name}"] = p.momentum.copy()
    for name, st in model.bn.items():
        out[f"bnstat.{name}.mean"] = st.running_mean.copy()
        out[f"bnstat.{name}.var"] = st.running_var.copy()
    out["input_norm.mean"] = model.norm_mean.copy()
    out["input_norm.std"] = model.norm_std.copy()
    return out


def restore_tensors(model: ModelState, table: dict[str, np.ndarray]) -> None:
    for name, p in model.params.items():
        p.value.data = table[f"param.{name}"].copy()
        p.momentum = table[f"momentum.{name}"].copy()
    for name, st in model.bn.items():
        st.running_mean = table[f"bnstat.{name}.mean"].copy()
        st.running_var = table[f"bnstat.{name}.var"].copy()
    model.norm_mean = table["input_norm.mean"].copy()
    model.norm_std = table["input_norm.std"].copy()


def model_from_checkpoint(ckpt: Checkpoint) -> ModelState:
    model = build_model(ckpt.config, seed=0)
    restore_tensors(model, ckpt.tensors)
    return model.eval_mode()


# ---------------------------------------------------------------------------
# checkpoint file format

def _config_to_dict(config: BagNetConfig) -> dict:
    return {
        "q": config.q, "stem": list(config.stem),
        "blocks": [[b.in_channels, b.mid_channels, b.out_channels, b.kernel, b.stride]
                   for b in config.blocks],
        "num_classes": config.num_classes, "input_size": config.input_size,
        "feature_dim": config.feature_dim, "name": config.name,
    }


def _config_from_dict(d: dict) -> BagNetConfig:
    return BagNetConfig(
        q=d["q"], stem=tuple(d["stem"]),
        blocks=tuple(BlockSpec(*b) for b in d["blocks"]),
        num_classes=d["num_classes"], input_size=d["input_size"],
        feature_dim=d["feature_dim"], name=d.get("name", "custom"))


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,lr,train_loss,val_top1"]
    for row in history:
        lines.append("%d,%.9g,%.9g,%.9g" % (row["epoch"], row["lr"],
                                            row["train_loss"], row["val_top1"]))
    return "\n".join(lines) + "\n"


def history_from_csv(text: str) -> list[dict]:
    rows = []
    for line in text.strip().split("\n")[1:]:
        if not line:
            continue
        e, lr, tl, va = line.split(",")
        rows.append({"epoch": int(e), "lr": float(lr), "train_loss": float(tl),
                     "val_top1": float(va)})
    return rows


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    cfg = json.dumps(_config_to_dict(ckpt.config), sort_keys=True,
                     separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr32.ndim))
        for d in arr32.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr32.tobytes())
    meta = json.dumps({
        "epoch": ckpt.epoch, "base_seed": ckpt.base_seed,
        "diverged": ckpt.diverged, "history_csv": history_to_csv(ckpt.history),
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    off = 5

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(f"{path}: checkpoint truncated at offset {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    cfg_len = struct.unpack("<I", take(4))[0]
    config = _config_from_dict(json.loads(take(cfg_len)))
    n_tensors = struct.unpack("<I", take(4))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode("utf-8")
        rank = take(1)[0]
        dims = [struct.unpack("<I", take(4))[0] for _ in range(rank)]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
        tensors[name] = arr
    meta_len = struct.unpack("<I", take(4))[0]
    meta = json.loads(take(meta_len))
    return Checkpoint(config, tensors, meta["epoch"], meta["base_seed"],
                      history_from_csv(meta["history_csv"]), meta.get("diverged", False))
