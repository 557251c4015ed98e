"""Audio network regressing an active speaker's horizontal position and a
confidence from a stack of normalized log-mel images.

Seven conv blocks (conv 3x3 -> ReLU -> dropout 0.2 -> batch norm, with
stride-2 max pooling after blocks 1, 2, 5 and 6) reduce the 64x64 input
to a 512-dim vector (global average pool), four fully connected layers
shrink it to 16, an 11-dim camera-view one-hot is concatenated, and a
2-layer head emits (position, confidence) through a sigmoid.

Training minimizes a sum-squared loss: on active frames a position term
(x - x_hat)^2 plus a confidence term (C - C_hat)^2 with target
C = 1 - |x - x_hat|; on silent frames the confidence term alone with
target 0.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

ONE_HOT_LEN = 11
FEATURE_SIZE = 64
POOL_AFTER = (0, 1, 4, 5)  # conv block indices followed by stride-2 max pool

_CKPT_MAGIC = b"ALCK"


class ModelError(ValueError):
    """Raised on invalid model configuration or inputs."""


class TrainingError(RuntimeError):
    """Raised when training diverges; carries the failing epoch index."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs. conv_channels must end at 512 (the flattened
    feature size); fc_dims shrink 512 toward the one-hot length."""

    in_channels: int = 15
    conv_channels: tuple = (12, 16, 24, 32, 48, 64, 512)
    fc_dims: tuple = (128, 64, 32, 16)
    head_hidden: int = 16
    dropout_rate: float = 0.2
    one_hot_len: int = ONE_HOT_LEN

    def __post_init__(self):
        if len(self.conv_channels) != 7:
            raise ModelError("exactly 7 conv layers are required")
        if self.conv_channels[-1] != 512:
            raise ModelError("final conv width must be 512")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must be in [0, 1)")
        if self.in_channels <= 0:
            raise ModelError("in_channels must be positive")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 2e-4
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ModelError("trainer config values must be positive")


@dataclass(frozen=True)
class Prediction:
    x_hat: float
    c_hat: float


class FastDropout(nn.Module):
    """Dropout with masks drawn from a numpy generator.

    torch's CPU bernoulli is the single most expensive op of a training
    step on small machines; numpy's PCG64 cuts mask generation ~5x. The
    generator is owned by the trainer so runs are reproducible from one
    seed. Identity when no generator is attached (inference/eval)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x):
        if not self.training or self.p == 0.0 or self.rng is None:
            return x
        u = self.rng.random(size=tuple(x.shape), dtype=np.float32)
        keep = torch.from_numpy(u) >= self.p
        return x * keep * (1.0 / (1.0 - self.p))


class SpeakerLocNet(nn.Module):
    """Position/confidence regressor over log-mel stacks."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        blocks = []
        chans = (config.in_channels,) + config.conv_channels
        for i in range(7):
            blocks += [
                nn.Conv2d(chans[i], chans[i + 1], kernel_size=3, padding=1),
                nn.ReLU(),
                FastDropout(config.dropout_rate),
                # Running stats decay 0.9 (torch's momentum is the update weight).
                nn.BatchNorm2d(chans[i + 1], momentum=0.1, eps=1e-5),
            ]
            if i in POOL_AFTER:
                blocks.append(nn.MaxPool2d(2))
        self.conv = nn.Sequential(*blocks)
        fcs = []
        dims = (config.conv_channels[-1],) + config.fc_dims
        for i in range(len(config.fc_dims)):
            fcs += [nn.Linear(dims[i], dims[i + 1]), nn.ReLU()]
        self.fc = nn.Sequential(*fcs)
        self.head = nn.Sequential(
            nn.Linear(config.fc_dims[-1] + config.one_hot_len, config.head_hidden),
            nn.ReLU(),
            nn.Linear(config.head_hidden, 2),
        )

    def attach_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if isinstance(m, FastDropout):
                m.rng = rng

    def forward(self, features: torch.Tensor, view_onehot: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.config.in_channels:
            raise ModelError(f"features must be (B, {self.config.in_channels}, "
                             f"{FEATURE_SIZE}, {FEATURE_SIZE}), got {tuple(features.shape)}")
        if view_onehot.ndim != 2 or view_onehot.shape[1] != self.config.one_hot_len:
            raise ModelError(f"one-hot must be (B, {self.config.one_hot_len}), "
                             f"got {tuple(view_onehot.shape)}")
        z = self.conv(features).mean(dim=(2, 3))  # global average to 1x1x512
        z = self.fc(z)
        z = torch.cat([z, view_onehot], dim=1)
        return torch.sigmoid(self.head(z))


def target_confidence(active: bool, x: float | None, x_hat: float) -> float:
    """Ground-truth confidence: 1 - |x - x_hat| when active, else 0."""
    if not active:
        return 0.0
    if x is None or not 0.0 <= x <= 1.0 or not 0.0 <= x_hat <= 1.0:
        raise ModelError("active targets require x and x_hat in [0, 1]")
    return 1.0 - abs(x - x_hat)


def loss_terms(pred: Prediction, active: bool, x: float | None = None) -> tuple[float, float, float]:
    """(total, position_term, confidence_term) for one sample."""
    c = target_confidence(active, x, pred.x_hat)
    conf = (c - pred.c_hat) ** 2
    pos = (x - pred.x_hat) ** 2 if active else 0.0
    return pos + conf, pos, conf


def batch_loss(outputs: torch.Tensor, active: torch.Tensor, x: torch.Tensor,
               tie_confidence_target: bool = False) -> torch.Tensor:
    """Per-sample training loss for a (B, 2) sigmoid output batch.

    The confidence target 1 - |x - x_hat| is treated as a label (detached)
    so the position estimate is pulled only by the position term;
    tie_confidence_target keeps it differentiable for gradient testing.
    """
    x_hat, c_hat = outputs[:, 0], outputs[:, 1]
    err = torch.where(active, x - x_hat, torch.zeros_like(x_hat))
    err_for_target = err if tie_confidence_target else err.detach()
    c_target = torch.where(active, 1.0 - err_for_target.abs(), torch.zeros_like(x_hat))
    return active.to(x_hat.dtype) * err ** 2 + (c_target - c_hat) ** 2


@dataclass
class FrameDataset:
    """In-memory (or memmapped) training tensors.

    features: (N, C, 64, 64) float; view_onehot: (N, 11); active: (N,) bool;
    x: (N,) normalized positions (ignored where inactive).
    """

    features: np.ndarray
    view_onehot: np.ndarray
    active: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.view_onehot) == len(self.active) == len(self.x) == n):
            raise ModelError("dataset arrays must share their first dimension")

    def __len__(self) -> int:
        return len(self.features)

    def fetch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        f = torch.from_numpy(np.ascontiguousarray(self.features[idx], dtype=np.float32))
        oh = torch.from_numpy(np.ascontiguousarray(self.view_onehot[idx], dtype=np.float32))
        act = torch.from_numpy(np.ascontiguousarray(self.active[idx], dtype=bool))
        x = torch.from_numpy(np.ascontiguousarray(self.x[idx], dtype=np.float32))
        return f, oh, act, x


def recalibrate_batch_norm(net: SpeakerLocNet, dataset, batch_size: int = 64,
                           max_samples: int = 4096) -> None:
    """Re-estimate batch-norm running statistics with dropout disabled.

    Masks drawn during training inflate activation variance, so running
    stats collected then systematically mismatch dropout-free inference
    and bias every layer downstream. One cumulative-average pass over the
    data in inference conditions removes the shift. Deterministic (no
    randomness involved).
    """
    net.attach_dropout_rng(None)
    net.train()
    bns = [m for m in net.modules() if isinstance(m, nn.BatchNorm2d)]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    n = min(len(dataset), max_samples)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            f, oh, _, _ = dataset.fetch(np.arange(start, min(start + batch_size, n)))
            net(f, oh)
    for m in bns:
        m.momentum = 0.1
    net.eval()


def train(dataset, net_config: NetworkConfig, trainer_config: TrainerConfig,
          log=None) -> tuple[SpeakerLocNet, list]:
    """Train from scratch; deterministic for a fixed seed and thread count.

    Returns the trained net (eval mode, batch-norm statistics recalibrated
    for inference) and the per-epoch mean loss history. Raises
    TrainingError on NaN loss.
    """
    if len(dataset) == 0:
        raise ModelError("dataset is empty")
    seed_root = np.random.SeedSequence(trainer_config.rng_seed)
    shuffle_seed, dropout_seed, init_seed = seed_root.spawn(3)
    torch.manual_seed(int(init_seed.generate_state(1)[0]))
    net = SpeakerLocNet(net_config)
    net.attach_dropout_rng(np.random.Generator(np.random.PCG64(dropout_seed)))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    opt = torch.optim.Adam(net.parameters(), lr=trainer_config.learning_rate)

    history = []
    n = len(dataset)
    bs = trainer_config.batch_size
    for epoch in range(trainer_config.epochs):
        net.train()
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = np.sort(order[start:start + bs])  # sorted for memmap locality
            f, oh, act, x = dataset.fetch(idx)
            out = net(f, oh)
            loss = batch_loss(out, act, x).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = float(loss.detach())
            if not np.isfinite(val):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch)
            total += val * len(idx)
            count += len(idx)
        history.append(total / count)
        if log is not None:
            log(epoch, history[-1])
    recalibrate_batch_norm(net, dataset, batch_size=bs)
    return net, history


def predict_batch(net: SpeakerLocNet, features: np.ndarray,
                  view_onehot: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode (x_hat, c_hat) for every row; returns (N, 2) float64."""
    net.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(features), batch_size):
            f = torch.from_numpy(np.ascontiguousarray(
                features[start:start + batch_size], dtype=np.float32))
            oh = torch.from_numpy(np.ascontiguousarray(
                view_onehot[start:start + batch_size], dtype=np.float32))
            outs.append(net(f, oh).numpy().astype(np.float64))
    return np.concatenate(outs, axis=0)


def predict(net: SpeakerLocNet, features: np.ndarray, view_onehot: np.ndarray) -> Prediction:
    out = predict_batch(net, features[None], np.asarray(view_onehot, dtype=np.float64)[None])
    return Prediction(x_hat=float(out[0, 0]), c_hat=float(out[0, 1]))


def gradient_check(net: SpeakerLocNet, features: np.ndarray, view_onehot: np.ndarray,
                   active: bool, x: float | None, n_params: int = 200,
                   step: float = 1e-4, rng_seed: int = 0) -> float:
    """Max relative error between backprop and central finite differences.

    Runs in float64 with batch-norm on frozen statistics and dropout off.
    The confidence target is computed once at the base point and held
    fixed, matching what one optimizer step differentiates. Gradients
    below 1e-6 in both routes are compared against that floor.
    """
    net64 = SpeakerLocNet(net.config).double()
    net64.load_state_dict({k: v.double() if v.is_floating_point() else v
                           for k, v in net.state_dict().items()})
    net64.eval()  # frozen BN stats, dropout inactive
    f = torch.from_numpy(np.ascontiguousarray(features[None], dtype=np.float64))
    oh = torch.from_numpy(np.ascontiguousarray(view_onehot, dtype=np.float64))[None]
    act = torch.tensor([active])
    with torch.no_grad():
        base = net64(f, oh)
        x_val = float(x) if active else 0.0
        c_target = target_confidence(active, x if active else None, float(base[0, 0]))

    def objective() -> torch.Tensor:
        out = net64(f, oh)
        pos = float(active) * (x_val - out[0, 0]) ** 2
        return pos + (c_target - out[0, 1]) ** 2

    loss = objective()
    loss.backward()
    params = [p for p in net64.parameters()]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    flat_idx = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)

    worst = 0.0
    with torch.no_grad():
        for fi in flat_idx:
            pi = int(np.searchsorted(offsets, fi, side="right") - 1)
            j = int(fi - offsets[pi])
            flat = params[pi].view(-1)
            grad = float(params[pi].grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + step
            hi = float(objective())
            flat[j] = orig - step
            lo = float(objective())
            flat[j] = orig
            fd = (hi - lo) / (2 * step)
            rel = abs(grad - fd) / max(abs(grad), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint: magic, u32 version, u64 meta length, canonical-JSON meta
# (configs, hashes, tensor directory), then raw little-endian tensors in
# directory order. Byte-deterministic for identical state.
# ---------------------------------------------------------------------------

_TENSOR_DTYPES = {"f4": np.float32, "i8": np.int64}


def save_checkpoint(path, net: SpeakerLocNet, trainer_config: TrainerConfig | None = None,
                    config_hash: str = "", stats_hash: str = "",
                    extra: dict | None = None) -> None:
    state = net.state_dict()
    directory = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().numpy()
        code = {np.dtype(np.float32): "f4", np.dtype(np.int64): "i8"}[arr.dtype]
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    meta = {
        "format": 1,
        "net_config": asdict(net.config),
        "trainer_config": asdict(trainer_config) if trainer_config else None,
        "config_hash": config_hash,
        "stats_hash": stats_hash,
        "tensors": directory,
        "extra": extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fp:
        fp.write(_CKPT_MAGIC)
        fp.write(struct.pack("<IQ", 1, len(meta_bytes)))
        fp.write(meta_bytes)
        for blob in blobs:
            fp.write(blob)


def load_checkpoint(path) -> tuple[SpeakerLocNet, dict]:
    with open(path, "rb") as fp:
        if fp.read(4) != _CKPT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack("<IQ", fp.read(12))
        if version != 1:
            raise ModelError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fp.read(meta_len))
        state = {}
        for entry in meta["tensors"]:
            dtype = np.dtype(_TENSOR_DTYPES[entry["dtype"]])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fp.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
            state[entry["name"]] = torch.from_numpy(arr)
    cfg = meta["net_config"]
    cfg["conv_channels"] = tuple(cfg["conv_channels"])
    cfg["fc_dims"] = tuple(cfg["fc_dims"])
    net = SpeakerLocNet(NetworkConfig(**cfg))
    net.load_state_dict(state)
    net.eval()
    return net, meta


def save_loss_history(path, history: list, config_hash: str = "") -> None:
    with open(path, "w") as f:
        if config_hash:
            f.write(f"# config={config_hash}\n")
        f.write("epoch,mean_loss\n")
        for i, v in enumerate(history):
            f.write(f"{i},{float(v)!r}\n")
