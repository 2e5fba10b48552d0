"""Training loop with validation early stopping, presets, and the TMCK checkpoint format."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .blocks import BasicUNetConfig, ImprovedUNetConfig
from .errors import CheckpointError, ConfigurationError, NumericalError, ShapeError
from .losses import LOSSES, ScheduleSpec
from .models import build_model, config_from_dict
from .transunet import TransUNetConfig, full_scale_config

log = logging.getLogger(__name__)

MAGIC = b"TMCK"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    model: str = "improved_unet"
    max_epochs: int = 100
    patience: int | None = None  # None disables early stopping
    batch_size: int = 8
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    loss: str = "dice"
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleSpec(**self.schedule)
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.patience is not None and self.patience < 0:
            raise ConfigurationError("patience must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _preset(model_config, **train):
    return model_config, TrainConfig(model=model_config.kind, **train)


def presets() -> dict:
    """Training setups keyed by name.

    Full size: basic (500 epochs, patience 50), improved (100 epochs, no early
    stopping), TransUNet (150 epochs, poly lr, combined loss). The ``*_desk``
    variants are small enough for a laptop CPU on 64x64 synthetic scenes.
    """
    step = ScheduleSpec("step_halving", initial_lr=0.001, halve_every=16)
    return {
        "basic_unet": _preset(BasicUNetConfig(), max_epochs=500, patience=50, loss="dice",
                              schedule=step),
        "improved_unet": _preset(ImprovedUNetConfig(), max_epochs=100, patience=None,
                                 loss="dice", schedule=step),
        "transunet": _preset(full_scale_config(), max_epochs=150, patience=None,
                             loss="combined", optimizer="sgd",
                             schedule=ScheduleSpec("poly", initial_lr=0.01, max_epoch=150)),
        "basic_unet_desk": _preset(BasicUNetConfig(), max_epochs=30, patience=10,
                                   loss="dice", batch_size=2,
                                   schedule=ScheduleSpec("step_halving", 0.003, halve_every=16)),
        "improved_unet_desk": _preset(ImprovedUNetConfig(base_channels=8), max_epochs=30,
                                      loss="dice", batch_size=2,
                                      schedule=ScheduleSpec("step_halving", 0.003, halve_every=16)),
        "transunet_desk": _preset(TransUNetConfig(), max_epochs=30, loss="combined",
                                  optimizer="sgd", batch_size=2,
                                  schedule=ScheduleSpec("poly", initial_lr=0.01, max_epoch=30)),
        "tiny": _preset(ImprovedUNetConfig(base_channels=2, aspp_dilation_rates=[1, 2]),
                        max_epochs=2, loss="dice", batch_size=2,
                        schedule=ScheduleSpec("step_halving", 0.003, halve_every=16)),
    }


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    wall_time: float = 0.0


@dataclass
class Checkpoint:
    model_config: dict
    params: dict  # name -> float32 array, buffers included
    train_config: dict = field(default_factory=dict)
    optimizer_state: dict = field(default_factory=dict)
    best_val_loss: float = math.inf
    epoch: int = -1
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def build(self) -> torch.nn.Module:
        model = build_model(config_from_dict(self.model_config))
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.params.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def samples_to_tensors(samples, dtype=torch.float32):
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    masks = np.stack([s.mask for s in samples])[:, None]
    return (torch.from_numpy(np.ascontiguousarray(images)).to(dtype) / 255.0,
            torch.from_numpy(masks).to(dtype))


def make_optimizer(model, cfg: TrainConfig):
    lr = cfg.schedule.lr(0)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr, betas=(cfg.beta1, cfg.beta2),
                                eps=cfg.adam_eps)
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=cfg.momentum)


def _state_arrays(model) -> dict:
    return {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}


def evaluate_loss(model, images, masks, loss_fn, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x, y = images[start:start + batch_size], masks[start:start + batch_size]
            total += float(loss_fn(model(x), y)) * len(x)
    return total / len(images)


def train(model_config, train_set, val_set, cfg: TrainConfig, resume: Checkpoint | None = None,
          epochs: int | None = None):
    """Train and return (best-validation checkpoint, per-epoch logs).

    ``resume`` continues from a checkpoint's epoch with its parameters and
    optimizer state; ``epochs`` caps how many epochs this call runs.
    """
    if not train_set or not val_set:
        raise ConfigurationError("training and validation sets must be nonempty")
    if isinstance(model_config, dict):
        model_config = config_from_dict(model_config)
    torch.manual_seed(cfg.seed)
    model = build_model(model_config, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    start_epoch, best_val = 0, math.inf
    if resume is not None:
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in resume.params.items()})
        if resume.optimizer_state:
            optimizer.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch + 1
        best_val = resume.best_val_loss

    x_train, y_train = samples_to_tensors(train_set)
    x_val, y_val = samples_to_tensors(val_set)
    try:
        model.eval()
        with torch.no_grad():
            model(x_train[:1])
    except (RuntimeError, ValueError) as exc:
        raise ConfigurationError(f"model cannot consume the training images: {exc}") from exc
    if x_val.shape[1:] != x_train.shape[1:]:
        raise ShapeError("training and validation images differ in shape")

    loss_fn = LOSSES[cfg.loss]
    n = len(x_train)
    logs: list[EpochLog] = []
    best = None
    since_best = 0
    end_epoch = cfg.max_epochs if epochs is None else min(cfg.max_epochs, start_epoch + epochs)

    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        lr = cfg.schedule.lr(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        running = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            x, y = x_train[idx], y_train[idx]
            optimizer.zero_grad()
            loss = loss_fn(model(x), y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            loss.backward()
            optimizer.step()
            running += loss.item() * len(idx)
        train_loss = running / n
        val_loss = evaluate_loss(model, x_val, y_val, loss_fn, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}", epoch, None)
        entry = EpochLog(epoch, lr, train_loss, val_loss, time.perf_counter() - t0)
        logs.append(entry)
        log.info("epoch %d lr %.6g train %.5f val %.5f (%.1fs)", epoch, lr, train_loss,
                 val_loss, entry.wall_time)

        if val_loss < best_val:
            best_val = val_loss
            since_best = 0
            best = Checkpoint(
                model_config=model_config.to_dict(),
                params=_state_arrays(model),
                train_config=cfg.to_dict(),
                optimizer_state=copy.deepcopy(optimizer.state_dict()),
                best_val_loss=val_loss,
                epoch=epoch,
                rng_state={"seed": cfg.seed, "next_epoch": epoch + 1},
            )
        else:
            since_best += 1
            if cfg.patience is not None and since_best > cfg.patience:
                log.info("early stop at epoch %d (best %.5f)", epoch, best_val)
                break

    if best is None:
        # resumed run never beat the stored best: hand the stored state back
        best = resume
    return best, logs


# ---------------------------------------------------------------- epoch logs

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_loss")


def write_log_csv(logs, path) -> None:
    """Wall time is left out so identical runs give byte-identical files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for e in logs:
            w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_loss)])


def read_log_csv(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochLog(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                     float(r["val_loss"])) for r in rows]


# ---------------------------------------------------------------- checkpoint IO

def _pack_blob(name: str, array: np.ndarray) -> bytes:
    data = np.asarray(array, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    encoded = name.encode("utf-8")
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian: magic, u32 version, u32-length JSON header, u32 blob count,
    blobs (name, dims, f32 data), trailing u32 CRC32 of everything before it.
    """
    blobs = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    opt = ckpt.optimizer_state or {}
    for pid, state in opt.get("state", {}).items():
        for key, value in state.items():
            blobs.append((f"optim/{pid}/{key}", torch.as_tensor(value).detach().numpy()))
    header = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "best_val_loss": ckpt.best_val_loss,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "optimizer_param_groups": opt.get("param_groups"),
        "param_dtypes": {k: str(np.asarray(v).dtype) for k, v in ckpt.params.items()},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", ckpt.version, len(text)) + text
    body += struct.pack("<I", len(blobs))
    for name, arr in blobs:
        body += _pack_blob(name, arr)
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise CheckpointError(f"{path} is truncated or corrupt (checksum mismatch)")
    r = _Reader(raw[:-4])
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
        params, optim = {}, {}
        for _ in range(r.u32()):
            name = r.take(r.u32()).decode("utf-8")
            ndim = r.u32()
            dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
            kind, _, key = name.partition("/")
            if kind == "param":
                params[key] = data
            else:
                pid, _, field_name = key.partition("/")
                optim.setdefault(int(pid), {})[field_name] = torch.from_numpy(data.copy())
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    dtypes = header.get("param_dtypes", {})
    params = {k: v.astype(dtypes.get(k, "float32")) for k, v in params.items()}
    opt_state = {}
    if header.get("optimizer_param_groups") is not None:
        opt_state = {"state": optim, "param_groups": header["optimizer_param_groups"]}
    return Checkpoint(
        model_config=header["model_config"],
        params=params,
        train_config=header["train_config"],
        optimizer_state=opt_state,
        best_val_loss=header["best_val_loss"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        version=version,
    )
