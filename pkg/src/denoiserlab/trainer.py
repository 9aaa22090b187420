"""Denoising training loop, Adam, and the binary checkpoint format.

Checkpoint layout::

    b"DNLCKPT\\0" | uint32 LE header length | JSON header (utf-8) | float32 LE payloads

The header lists tensors (name, shape, byte offset into the payload) in
payload order, together with the model config, optimizer settings and
training metadata.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndnet
from .data import Dataset, SigmaRange, sample_sigma
from .seeding import derive_seed
from .unet import UNetConfig, UNetModel

logger = logging.getLogger(__name__)

MAGIC = b"DNLCKPT\x00"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr_init: float = 1e-3
    lr_decay_factor: float = 2.0
    lr_decay_every: int = 100
    sigma_range: SigmaRange = field(default_factory=SigmaRange)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be positive")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr_init / self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = [self.sigma_range.sigma_min, self.sigma_range.sigma_max]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["sigma_range"] = SigmaRange(*d["sigma_range"])
        return cls(**d)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ndnet.ShapeError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class LossLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, lr: float, train_loss: float, heldout_loss: float | None):
        self.rows.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                          "heldout_loss": heldout_loss})

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r["train_loss"] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "heldout_loss"])
            for r in self.rows:
                ho = "" if r["heldout_loss"] is None else repr(r["heldout_loss"])
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), ho])


def denoising_loss(model: UNetModel, x: np.ndarray, sigma: np.ndarray, z: np.ndarray) -> ndnet.Tensor:
    """Batch mean of ||f(x + sigma z) + sigma z||^2 (summed over pixels)."""
    dtype = model.params["out.weight"].dtype
    noise = (sigma.reshape(-1, 1, 1, 1) * z).astype(dtype)
    out, _ = model.forward((x + noise).astype(dtype))
    err = ndnet.add(out, noise)
    return ndnet.mul(ndnet.sum(ndnet.square(err)), 1.0 / len(x))


def heldout_draws(n: int, shape, sigma_range: SigmaRange, seed: int):
    rng = np.random.default_rng(derive_seed(seed, "heldout"))
    sig = sample_sigma(sigma_range, rng, size=n)
    z = rng.standard_normal((n,) + tuple(shape))
    return sig, z


def evaluate_mse(model: UNetModel, images: np.ndarray, sigma: np.ndarray, z: np.ndarray,
                 batch_size: int = 256) -> np.ndarray:
    """Per-image squared error ||denoise(x_sigma) - x||^2."""
    out = np.empty(len(images))
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        loss_terms = _per_image_error(model, images[sl], sigma[sl], z[sl])
        out[sl] = loss_terms
    return out


def _per_image_error(model, x, sigma, z):
    dtype = model.params["out.weight"].dtype
    noise = (sigma.reshape(-1, 1, 1, 1) * z).astype(dtype)
    out, _ = model.forward((x + noise).astype(dtype))
    err = out.data.astype(np.float64) + noise
    return (err ** 2).reshape(len(x), -1).sum(axis=1)


def train(model: UNetModel, dataset: Dataset, config: TrainConfig,
          heldout: Dataset | None = None, state: AdamState | None = None,
          log: LossLog | None = None, start_epoch: int = 0,
          sampler=None) -> tuple[UNetModel, LossLog, AdamState]:
    """Minimize E||f(x_sigma) + sigma z||^2 with Adam.

    sigma and z are redrawn for every image every epoch from streams derived
    from ``config.seed`` and the epoch index, so resumed runs reproduce an
    uninterrupted one. ``sampler(epoch, rng, n)`` may replace the dataset by
    fresh clean images each epoch (used for analytically known densities).
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if dataset.image_shape != (model.config.in_channels, model.config.image_size,
                               model.config.image_size):
        raise TrainingError(f"dataset images {dataset.image_shape} do not match model config")
    state = state or AdamState()
    log = log or LossLog()
    ho = None
    if heldout is not None:
        ho = (heldout.images,) + heldout_draws(len(heldout), heldout.image_shape,
                                               config.sigma_range, config.seed)
    params = {k: p.data for k, p in model.params.items()}
    n = len(dataset)
    for epoch in range(start_epoch, start_epoch + config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "epoch", epoch))
        images = dataset.images if sampler is None else sampler(epoch, rng, n)
        order = rng.permutation(n)
        sig = sample_sigma(config.sigma_range, rng, size=n)
        z = rng.standard_normal(images.shape)
        lr = config.lr_at(epoch)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            with ndnet.Tape() as tape:
                loss = denoising_loss(model, images[idx], sig[idx], z[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {s}")
            tape.backward(loss)
            adam_step(params, {k: p.grad for k, p in model.params.items()}, state, lr)
            total += value * len(idx)
        train_loss = total / n
        ho_loss = float(evaluate_mse(model, *ho).mean()) if ho is not None else None
        log.append(epoch, lr, train_loss, ho_loss)
        logger.info("epoch %d lr %.2e train %.5f heldout %s", epoch, lr, train_loss, ho_loss)
    return model, log, state


def trend_violations(losses, window: int = 10) -> float:
    """Fraction of steps where the ``window``-epoch moving average goes up."""
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) <= window:
        return 0.0
    ma = np.convolve(losses, np.ones(window) / window, mode="valid")
    return float(np.mean(np.diff(ma) > 0))


# checkpoints -------------------------------------------------------------------

def save_checkpoint(model: UNetModel, state: AdamState | None, path, metadata: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v.data) for k, v in model.params.items()]
    if state is not None:
        arrays += [(f"adam_m/{k}", v) for k, v in state.m.items()]
        arrays += [(f"adam_v/{k}", v) for k, v in state.v.items()]
    tensors, offset, payload = [], 0, []
    for name, arr in arrays:
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "optimizer": None if state is None else {
            "kind": "adam", "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
            "step": state.step},
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for buf in payload:
            fh.write(buf)


def load_checkpoint(path) -> tuple[UNetModel, AdamState | None, dict]:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 4 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", buf[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(buf) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    body = memoryview(buf)[start + hlen:]
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        end = t["offset"] + 4 * n
        if end > len(body):
            raise CheckpointError(f"{path}: truncated payload at tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(body[t["offset"]:end], dtype="<f4").astype(np.float32) \
            .reshape(t["shape"])
    expected = sum(4 * (int(np.prod(t["shape"])) if t["shape"] else 1) for t in header["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: payload size {len(body)} != expected {expected}")
    config = UNetConfig.from_dict(header["config"])
    params = {k[len("param/"):]: ndnet.Tensor(v, requires_grad=True, name=k[len("param/"):])
              for k, v in arrays.items() if k.startswith("param/")}
    model = UNetModel(config, params)
    state = None
    opt = header.get("optimizer")
    if opt is not None:
        state = AdamState(opt["beta1"], opt["beta2"], opt["eps"], opt["step"],
                          {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                          {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")})
    return model, state, header.get("metadata", {})
