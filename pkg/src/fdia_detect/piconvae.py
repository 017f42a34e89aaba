"""Physics-informed convolutional autoencoder.

Encoder: Conv1D(64,k5) -> Conv1D(32,k3) -> Dense(bottleneck).
Decoder: Dense -> TransposedConv1D(32,k3) -> TransposedConv1D(64,k5) -> Dense head (64 -> 6).
Every hidden layer is followed by batch norm and LeakyReLU; the conv layers
also get dropout. The physics loss penalizes the reconstruction's violation
of p = v i cos(theta - delta) and q = v i sin(theta - delta), evaluated after
mapping the reconstruction back to physical units.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import neural as nn
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .telemetry import CHANNELS, DELTA, DEFAULT_WINDOW, I, P, Q, THETA, V

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    n_w: int = DEFAULT_WINDOW
    channels: int = len(CHANNELS)
    enc_filters: Tuple[int, int] = (64, 32)
    enc_kernels: Tuple[int, int] = (5, 3)
    bottleneck: int = 24
    dropout: float = 0.2
    leaky_slope: float = 0.2
    lambda_reg: float = 1e-4
    alpha_d: float = 1.0
    alpha_phy: float = 1.0
    physics_enabled: bool = True
    epochs: int = 1000
    batch_size: int = 64
    patience: int = 20
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    lr_interval: int = 10
    update_mode: str = "alternating"  # or "joint"
    recon_reduction: str = "window_sum"  # or "mean"
    seed: int = 0

    def __post_init__(self):
        self.enc_filters = tuple(int(f) for f in self.enc_filters)
        self.enc_kernels = tuple(int(k) for k in self.enc_kernels)

    def validate(self):
        if len(self.enc_filters) != 2 or len(self.enc_kernels) != 2:
            raise ConfigError("encoder needs exactly two conv layers")
        if any(k % 2 == 0 for k in self.enc_kernels):
            raise ConfigError("conv kernels must be odd")
        if self.alpha_d < 0 or self.alpha_phy < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.recon_reduction not in ("window_sum", "mean"):
            raise ConfigError(f"unknown recon_reduction {self.recon_reduction!r}")
        if self.update_mode not in ("alternating", "joint"):
            raise ConfigError(f"unknown update_mode {self.update_mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["enc_filters"] = list(self.enc_filters)
        d["enc_kernels"] = list(self.enc_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _block(prefix, conv, filters, slope, dropout):
    return [conv, nn.BatchNorm(filters, name=f"{prefix}_bn"),
            nn.LeakyReLU(slope, name=f"{prefix}_act"), nn.Dropout(dropout, name=f"{prefix}_drop")]


class PIConvAEModel:
    """Autoencoder over windows shaped (N, n_w, 6) in MinMax space."""

    def __init__(self, config: Optional[ModelConfig] = None, channel_min=None, channel_max=None):
        self.config = cfg = config or ModelConfig()
        cfg.validate()
        init_rng = np.random.default_rng(cfg.seed)
        f1, f2 = cfg.enc_filters
        k1, k2 = cfg.enc_kernels
        c, L, s = cfg.channels, cfg.n_w, cfg.leaky_slope
        self.encoder = nn.Sequential(
            [nn.Permute((0, 2, 1), name="to_ncl")]
            + _block("conv1", nn.Conv1D(c, f1, k1, init_rng, name="conv1", need_input_grad=False), f1, s, cfg.dropout)
            + _block("conv2", nn.Conv1D(f1, f2, k2, init_rng, name="conv2"), f2, s, cfg.dropout)
            + [nn.Reshape((f2 * L,), name="flatten"),
               nn.Dense(f2 * L, cfg.bottleneck, init_rng, name="fc"),
               nn.BatchNorm(cfg.bottleneck, name="fc_bn"),
               nn.LeakyReLU(s, name="fc_act")],
            name="enc",
        )
        self.decoder = nn.Sequential(
            [nn.Dense(cfg.bottleneck, f2 * L, init_rng, name="fc"),
             nn.BatchNorm(f2 * L, name="fc_bn"),
             nn.LeakyReLU(s, name="fc_act"),
             nn.Reshape((f2, L), name="unflatten")]
            + _block("tconv1", nn.TransposedConv1D(f2, f2, k2, init_rng, name="tconv1"), f2, s, cfg.dropout)
            + _block("tconv2", nn.TransposedConv1D(f2, f1, k1, init_rng, name="tconv2"), f1, s, cfg.dropout)
            + [nn.Permute((0, 2, 1), name="to_nlc"),
               nn.Dense(f1, c, init_rng, name="head", init="glorot")],
            name="dec",
        )
        self.channel_min = None if channel_min is None else np.asarray(channel_min, dtype=np.float64)
        self.channel_max = None if channel_max is None else np.asarray(channel_max, dtype=np.float64)
        self.optimizer = nn.OptimizerState(cfg.learning_rate, cfg.lr_decay, cfg.lr_interval)
        self.epoch = 0
        self.rng = np.random.default_rng([cfg.seed, 1])

    # ------------------------------------------------------------ params

    def parameters(self) -> Dict[str, np.ndarray]:
        return {**self.encoder.parameters(), **self.decoder.parameters()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {**self.encoder.gradients(), **self.decoder.gradients()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {**self.encoder.buffers(), **self.decoder.buffers()}

    def load_buffers(self, values):
        self.encoder.load_buffers(values)
        self.decoder.load_buffers(values)

    def regularized_weights(self):
        yield from self.encoder.regularized_weights()
        yield from self.decoder.regularized_weights()

    def set_batchnorm_frozen(self, frozen=True):
        for seq in (self.encoder, self.decoder):
            for layer in seq.layers:
                if isinstance(layer, nn.BatchNorm):
                    layer.frozen = frozen

    def snapshot(self):
        return ({k: v.copy() for k, v in self.parameters().items()},
                {k: v.copy() for k, v in self.buffers().items()})

    def restore(self, snap):
        params, bufs = snap
        for k, v in self.parameters().items():
            v[...] = params[k]
        self.load_buffers(bufs)

    # ------------------------------------------------------------ forward/backward

    def forward(self, batch, mode="eval"):
        batch = np.asarray(batch, dtype=np.float64)
        cfg = self.config
        if batch.ndim != 3 or batch.shape[2] != cfg.channels:
            raise DataError(f"expected windows shaped (N, {cfg.n_w}, {cfg.channels}), got {batch.shape}")
        if batch.shape[1] != cfg.n_w:
            raise DataError(f"window length {batch.shape[1]} != model n_w {cfg.n_w}")
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        z = self.encoder.forward(batch, training, self.rng)
        return self.decoder.forward(z, training, self.rng)

    def backward(self, grad_xhat):
        self.encoder.zero_grad()
        self.decoder.zero_grad()
        g = self.decoder.backward(grad_xhat)
        return self.encoder.backward(g)

    def reconstruct(self, windows, batch_size=1024):
        out = np.empty_like(np.asarray(windows, dtype=np.float64))
        for start in range(0, len(windows), batch_size):
            out[start:start + batch_size] = self.forward(windows[start:start + batch_size], "eval")
        return out


# ---------------------------------------------------------------- losses

def reconstruction_mse(x, x_hat):
    return float(np.mean((np.asarray(x_hat) - np.asarray(x)) ** 2))


def _recon_scale(x, reduction):
    # window_sum: squared error summed over each window, averaged over windows
    return float(np.prod(np.shape(x)[1:])) if reduction == "window_sum" else 1.0


def loss_ae(x, x_hat, weights, lambda_reg, reduction="mean"):
    """Squared reconstruction error plus lambda * sum of squared weights.

    ``reduction="mean"`` averages over every element; ``"window_sum"`` sums
    the squared error within each window and averages over windows.
    """
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise DataError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    reg = sum(float(np.sum(w * w)) for w in weights)
    return _recon_scale(x, reduction) * reconstruction_mse(x, x_hat) + lambda_reg * reg


def _denorm(model, x_hat):
    if model.channel_min is None or model.channel_max is None:
        raise DataError("model has no normalization constants; physics loss needs physical units")
    scale = model.channel_max - model.channel_min
    return x_hat * scale + model.channel_min, scale


def physics_terms(phys):
    """Residuals of the power identities and the shared trig factors."""
    v, i, th, de, p, q = (phys[..., k] for k in range(6))
    phi = th - de
    cos, sin = np.cos(phi), np.sin(phi)
    vi = v * i
    return p - vi * cos, q - vi * sin, (v, i, vi, cos, sin)


def loss_physics(x_hat, model):
    """(L_PhyP, L_PhyQ): mean squared power-identity residuals in physical units."""
    phys, _ = _denorm(model, np.asarray(x_hat, dtype=np.float64))
    rp, rq, _ = physics_terms(phys)
    return float(np.mean(rp ** 2)), float(np.mean(rq ** 2))


def physics_grad(x_hat, model):
    """Gradients of L_PhyP and L_PhyQ w.r.t. the normalized reconstruction."""
    phys, scale = _denorm(model, x_hat)
    rp, rq, (v, i, vi, cos, sin) = physics_terms(phys)
    m = rp.size
    gp, gq = 2 * rp / m, 2 * rq / m
    g = np.empty_like(phys)
    g[..., V] = -(gp * i * cos + gq * i * sin)
    g[..., I] = -(gp * v * cos + gq * v * sin)
    g[..., THETA] = gp * vi * sin - gq * vi * cos
    g[..., DELTA] = -g[..., THETA]
    g[..., P] = gp
    g[..., Q] = gq
    return g * scale


@dataclass
class LossBreakdown:
    total: float
    ae: float
    phy_p: float
    phy_q: float
    mse: float


def loss_total(x, x_hat, model) -> LossBreakdown:
    """alpha_d * L_AE + alpha_phy * (L_PhyP + L_PhyQ); physics off gives L_AE alone."""
    cfg = model.config
    weights = [w for _, w in model.regularized_weights()]
    ae = loss_ae(x, x_hat, weights, cfg.lambda_reg, cfg.recon_reduction)
    mse = reconstruction_mse(x, x_hat)
    if cfg.physics_enabled:
        lp, lq = loss_physics(x_hat, model)
        total = cfg.alpha_d * ae + cfg.alpha_phy * (lp + lq)
    else:
        lp = lq = float("nan")
        total = cfg.alpha_d * ae
    return LossBreakdown(total, ae, lp, lq, mse)


def loss_and_backward(model, x, mode="train"):
    """Forward pass, total loss and parameter gradients (left on the layers)."""
    cfg = model.config
    x_hat = model.forward(x, mode)
    out = loss_total(x, x_hat, model)
    if not np.isfinite(out.total):
        raise NumericError("non-finite training loss")
    grad = cfg.alpha_d * _recon_scale(x, cfg.recon_reduction) * 2.0 * (x_hat - x) / x.size
    if cfg.physics_enabled and cfg.alpha_phy:
        grad = grad + cfg.alpha_phy * physics_grad(x_hat, model)
    model.backward(grad)
    reg = 2.0 * cfg.alpha_d * cfg.lambda_reg
    for seq in (model.encoder, model.decoder):
        for layer in seq.layers:
            for k in layer.regularized:
                layer.grads[k] += reg * layer.params[k]
    return out, x_hat


# ---------------------------------------------------------------- training

@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_ae: List[float] = field(default_factory=list)
    val_phy_p: List[float] = field(default_factory=list)
    val_phy_q: List[float] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)
    learning_rate: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None  # 1-based
    stop_reason: str = "max_epochs"

    @property
    def epochs_run(self):
        return len(self.val_loss)

    def rows(self):
        for k in range(self.epochs_run):
            yield {
                "epoch": k + 1,
                "train_loss": self.train_loss[k],
                "val_loss": self.val_loss[k],
                "val_ae": self.val_ae[k],
                "val_phy_p": self.val_phy_p[k],
                "val_phy_q": self.val_phy_q[k],
                "val_mse": self.val_mse[k],
                "learning_rate": self.learning_rate[k],
            }


def evaluate_loss(model, windows, batch_size=1024) -> LossBreakdown:
    """Eval-mode loss over a window set, batched; components are sample-weighted means."""
    n = len(windows)
    acc = np.zeros(5)
    for start in range(0, n, batch_size):
        xb = windows[start:start + batch_size]
        out = loss_total(xb, model.forward(xb, "eval"), model)
        acc += len(xb) * np.array([out.total, out.ae, out.phy_p, out.phy_q, out.mse])
    return LossBreakdown(*(acc / n))


def _encoder_names(model):
    return set(model.encoder.parameters())


def train(model: PIConvAEModel, train_windows, val_windows, progress=None) -> TrainReport:
    """Mini-batch training with alternating encoder/decoder updates and early stopping.

    Per batch in alternating mode: gradients of the total loss are taken
    with the decoder held fixed and only the encoder is stepped, then the
    batch is re-run and only the decoder is stepped. The learning rate
    decays by ``lr_decay`` every ``lr_interval`` epochs. After ``patience``
    epochs without a new best validation loss, training stops and the best
    parameters are restored.
    """
    cfg = model.config
    train_windows = np.asarray(train_windows, dtype=np.float64)
    val_windows = np.asarray(val_windows, dtype=np.float64)
    report = TrainReport()
    if cfg.epochs == 0:
        return report
    if len(train_windows) == 0:
        raise DataError("empty training set")
    if len(val_windows) == 0:
        raise DataError("empty validation set")

    params = model.parameters()
    enc = _encoder_names(model)
    groups = {
        "encoder": [k for k in params if k in enc],
        "decoder": [k for k in params if k not in enc],
    }
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    best, best_loss, stale = None, np.inf, 0
    n = len(train_windows)
    for epoch in range(cfg.epochs):
        model.optimizer.schedule_step = model.epoch
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            xb = train_windows[idx]
            try:
                if cfg.update_mode == "joint":
                    out, _ = loss_and_backward(model, xb)
                    nn.adam_step(params, model.gradients(), model.optimizer)
                else:
                    out, _ = loss_and_backward(model, xb)
                    grads = model.gradients()
                    nn.adam_step(params, {k: grads[k] for k in groups["encoder"]}, model.optimizer)
                    _, _ = loss_and_backward(model, xb)
                    grads = model.gradients()
                    nn.adam_step(params, {k: grads[k] for k in groups["decoder"]}, model.optimizer)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            total += out.total * len(idx)
            seen += len(idx)
        model.epoch += 1
        val = evaluate_loss(model, val_windows)
        report.train_loss.append(total / max(seen, 1))
        report.val_loss.append(val.total)
        report.val_ae.append(val.ae)
        report.val_phy_p.append(val.phy_p)
        report.val_phy_q.append(val.phy_q)
        report.val_mse.append(val.mse)
        report.learning_rate.append(model.optimizer.rate)
        if progress is not None:
            progress(epoch + 1, report)
        log.debug("epoch %d train %.6g val %.6g", epoch + 1, report.train_loss[-1], val.total)
        if val.total < best_loss:
            best_loss, stale = val.total, 0
            best = model.snapshot()
            report.best_epoch = epoch + 1
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stop_reason = "patience"
                break
    if best is not None:
        model.restore(best)
    return report


# ---------------------------------------------------------------- checkpoint

MAGIC = b"PICONVAE"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sI")


def _tensor_table(model):
    tensors = {}
    for k, v in model.parameters().items():
        tensors[f"param:{k}"] = v
    for k, v in model.buffers().items():
        tensors[f"buffer:{k}"] = v
    if model.channel_min is not None:
        tensors["norm:channel_min"] = model.channel_min
        tensors["norm:channel_max"] = model.channel_max
    opt = model.optimizer
    for k in sorted(opt.m):
        tensors[f"adam_m:{k}"] = opt.m[k]
        tensors[f"adam_v:{k}"] = opt.v[k]
    return tensors


def save_checkpoint(model: PIConvAEModel, path) -> None:
    """Write a self-describing binary checkpoint.

    Layout (little-endian): magic ``PICONVAE``, uint32 format version,
    uint32 length + UTF-8 JSON metadata block, uint32 tensor count, then
    per tensor: uint16 name length, name, uint8 rank, rank x uint64 dims,
    float64 data. A trailing uint32 CRC32 covers everything before it.
    """
    opt = model.optimizer
    meta = {
        "config": model.config.to_dict(),
        "epoch": model.epoch,
        "optimizer": {"step": opt.step, "schedule_step": opt.schedule_step, "t": opt.t},
    }
    body = bytearray(_HEAD.pack(MAGIC, FORMAT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode()
    body += struct.pack("<I", len(blob)) + blob
    tensors = _tensor_table(model)
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> PIConvAEModel:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size + 4 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad format (magic mismatch)")
    _, version = _HEAD.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    try:
        pos = _HEAD.size
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode()
            pos += ln
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(data) - 4:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad format ({exc})") from exc

    model = PIConvAEModel(ModelConfig.from_dict(meta["config"]))
    params = model.parameters()
    for k, v in params.items():
        key = f"param:{k}"
        if key not in tensors or tensors[key].shape != v.shape:
            raise CheckpointError(f"{path}: missing or mis-shaped tensor {key!r}")
        v[...] = tensors[key]
    model.load_buffers({k[len("buffer:"):]: v for k, v in tensors.items() if k.startswith("buffer:")})
    if "norm:channel_min" in tensors:
        model.channel_min = tensors["norm:channel_min"]
        model.channel_max = tensors["norm:channel_max"]
    opt = model.optimizer
    opt.step = meta["optimizer"]["step"]
    opt.schedule_step = meta["optimizer"]["schedule_step"]
    opt.t = {k: int(v) for k, v in meta["optimizer"]["t"].items()}
    for k in opt.t:
        opt.m[k] = tensors[f"adam_m:{k}"].copy()
        opt.v[k] = tensors[f"adam_v:{k}"].copy()
    model.epoch = meta["epoch"]
    return model


def clone(model: PIConvAEModel) -> PIConvAEModel:
    return copy.deepcopy(model)
