"""1D convolutional streamline autoencoder.

Streamlines are fed as 3-channel signals of 256 samples. The encoder is a
stack of stride-2 convolutions with doubling widths and a linear map to the
latent space; the decoder mirrors it with nearest-neighbour upsampling.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.interpolate import BSpline
from torch import nn

from .errors import FormatError, InvalidStreamlineError, TrainingFailureError
from .geometry import N_VERTICES, resample

log = logging.getLogger(__name__)

LATENT_DIM = 32
MODEL_MAGIC = b"GAEM"
MODEL_VERSION = 1


@dataclass
class TrainingConfig:
    epochs: int = 150
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay: float = 0.98
    validation_fraction: float = 0.1
    patience: int = 30
    seed: int = 0
    reverse_probability: float = 0.5

    def __post_init__(self):
        problems = [
            f"{k} must be positive"
            for k in ("epochs", "batch_size", "learning_rate", "patience")
            if not getattr(self, k) > 0
        ]
        if not 0 < self.lr_decay <= 1:
            problems.append("lr_decay must lie in (0, 1]")
        if not 0 < self.validation_fraction < 1:
            problems.append("validation_fraction must lie in (0, 1)")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))


def spline_projection(n_samples: int, n_basis: int) -> np.ndarray:
    """Symmetric ``(n, n)`` least-squares projector onto clamped cubic B-splines.

    Applied as the last decoder step so that every decoded streamline is a C2
    curve with ``n_basis`` degrees of freedom per coordinate.
    """
    degree = 3
    inner = np.linspace(0.0, 1.0, n_basis - degree + 1)
    knots = np.concatenate([[0.0] * degree, inner, [1.0] * degree])
    t = np.linspace(0.0, 1.0, n_samples)
    basis = BSpline.design_matrix(t, knots, degree).toarray()
    q, _ = np.linalg.qr(basis)
    return q @ q.T


class StreamlineAE(nn.Module):
    def __init__(self, input_vertices=N_VERTICES, latent_dim=LATENT_DIM, channels=(16, 32, 64, 128),
                 smooth_basis=12):
        super().__init__()
        self.input_vertices = input_vertices
        self.latent_dim = latent_dim
        self.channels = tuple(channels)
        self.smooth_basis = smooth_basis
        if input_vertices % 2 ** len(channels):
            raise ValueError("input_vertices must be divisible by 2**len(channels)")
        self.bottleneck = input_vertices // 2 ** len(channels)

        enc = []
        c_in = 3
        for c in self.channels:
            enc += [nn.Conv1d(c_in, c, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.encoder_conv = nn.Sequential(*enc)
        flat = self.channels[-1] * self.bottleneck
        self.to_latent = nn.Linear(flat, latent_dim)
        self.from_latent = nn.Linear(latent_dim, flat)

        dec = []
        widths = list(reversed(self.channels))
        for c_in, c_out in zip(widths, widths[1:] + [widths[-1]]):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv1d(c_in, c_out, kernel_size=3, padding=1),
                nn.ReLU(),
            ]
        self.decoder_conv = nn.Sequential(*dec)
        self.to_output = nn.Conv1d(widths[-1], 3, kernel_size=3, padding=1)
        if smooth_basis:
            proj = torch.from_numpy(spline_projection(input_vertices, smooth_basis)).float()
            self.register_buffer("projection", proj, persistent=False)
        else:
            self.projection = None

    def encode(self, x):
        h = self.encoder_conv(x)
        return self.to_latent(h.flatten(1))

    def decode(self, z):
        h = torch.relu(self.from_latent(z))
        h = h.view(-1, self.channels[-1], self.bottleneck)
        y = self.to_output(self.decoder_conv(h))
        if self.projection is not None:
            y = y @ self.projection.to(y.dtype)
        return y

    def forward(self, x):
        return self.decode(self.encode(x))

    def arch(self) -> dict:
        return {
            "input_vertices": self.input_vertices,
            "latent_dim": self.latent_dim,
            "channels": list(self.channels),
            "smooth_basis": self.smooth_basis,
        }


@dataclass
class AEModel:
    """Trained network plus the per-axis box normalisation used for training."""

    net: StreamlineAE
    center: np.ndarray
    scale: np.ndarray
    history: list = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.net.latent_dim

    @property
    def input_vertices(self) -> int:
        return self.net.input_vertices

    def normalize(self, arr: np.ndarray) -> np.ndarray:
        return (arr - self.center) / self.scale

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        return arr * self.scale + self.center

    def extrapolation_flags(self, streamlines) -> np.ndarray:
        """True where a streamline leaves the normalisation box by > 20% of its size."""
        arr = self._stack(streamlines)
        limit = 1.0 + 0.2 * 2.0
        return np.any(np.abs(self.normalize(arr)) > limit, axis=(1, 2))

    def _stack(self, streamlines) -> np.ndarray:
        if isinstance(streamlines, np.ndarray) and streamlines.ndim == 3:
            arr = streamlines
            if arr.shape[1] != self.input_vertices:
                arr = np.stack([resample(s, self.input_vertices) for s in arr])
            return arr.astype(np.float64)
        n = self.input_vertices
        return np.stack(
            [s if len(s) == n else resample(s, n) for s in map(np.asarray, streamlines)]
        ).astype(np.float64)


def _to_tensor(arr: np.ndarray, dtype) -> torch.Tensor:
    # (B, V, 3) -> (B, 3, V)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 2, 1))).to(dtype)


def _net_dtype(net: nn.Module):
    return next(net.parameters()).dtype


def encode(model: AEModel, streamlines, batch_size: int = 1024) -> np.ndarray:
    """Latent vectors ``(m, latent_dim)`` for a list or array of streamlines."""
    arr = model._stack(streamlines)
    flags = model.extrapolation_flags(arr)
    if flags.any():
        warnings.warn(
            f"{int(flags.sum())} streamline(s) extrapolate beyond the model box",
            stacklevel=2,
        )
    x = model.normalize(arr)
    dtype = _net_dtype(model.net)
    out = []
    model.net.eval()
    with torch.no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(model.net.encode(_to_tensor(x[lo : lo + batch_size], dtype)).double().numpy())
    if not out:
        return np.zeros((0, model.latent_dim))
    return np.concatenate(out)


def decode(model: AEModel, latents, batch_size: int = 1024) -> np.ndarray:
    """Streamlines ``(m, input_vertices, 3)`` in world mm for latent rows."""
    z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if z.shape[1] != model.latent_dim:
        raise InvalidStreamlineError(f"latent must have {model.latent_dim} components")
    if not np.all(np.isfinite(z)):
        raise InvalidStreamlineError("latent vector has non-finite components")
    dtype = _net_dtype(model.net)
    out = []
    model.net.eval()
    with torch.no_grad():
        for lo in range(0, len(z), batch_size):
            y = model.net.decode(torch.from_numpy(z[lo : lo + batch_size]).to(dtype))
            out.append(y.double().numpy().transpose(0, 2, 1))
    if not out:
        return np.zeros((0, model.input_vertices, 3))
    return model.denormalize(np.concatenate(out))


def reconstruction_rms(model: AEModel, streamlines) -> float:
    """Root mean squared per-vertex Euclidean reconstruction error in mm."""
    arr = model._stack(streamlines)
    rec = decode(model, encode(model, arr))
    return float(np.sqrt(np.mean(np.sum((rec - arr) ** 2, axis=2))))


def _box(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis centre and half-extent mapping the data bounding box onto [-1, 1]^3."""
    lo = arr.reshape(-1, 3).min(axis=0)
    hi = arr.reshape(-1, 3).max(axis=0)
    half = (hi - lo) / 2
    # flat axes keep unit scale
    return (lo + hi) / 2, np.where(half > 0, half, 1.0)


def train(streamlines, cfg: TrainingConfig | None = None, net: StreamlineAE | None = None) -> AEModel:
    """Fit an autoencoder by minimising vertex-wise MSE.

    Returns the weights with the lowest validation MSE. Each epoch reverses
    every streamline with probability ``cfg.reverse_probability``.
    """
    cfg = cfg or TrainingConfig()
    n = N_VERTICES if net is None else net.input_vertices
    if hasattr(streamlines, "streamlines"):
        streamlines = streamlines.streamlines
    arr = np.stack([s if len(s) == n else resample(s, n) for s in map(np.asarray, streamlines)])
    if len(arr) < 100:
        raise ValueError(f"need at least 100 training streamlines, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidStreamlineError("training streamlines have non-finite coordinates")

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    if net is None:
        net = StreamlineAE()
    center, scale = _box(arr)
    model = AEModel(net, center, scale)
    x = model.normalize(arr).astype(np.float32)

    perm = rng.permutation(len(x))
    n_val = max(1, int(round(cfg.validation_fraction * len(x))))
    x_val = _to_tensor(x[perm[:n_val]], torch.float32)
    x_train = x[perm[n_val:]]

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    loss_fn = nn.MSELoss()
    best_loss, best_state, since_best = math.inf, None, 0
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(x_train))
        flip = rng.random(len(x_train)) < cfg.reverse_probability
        batch_x = x_train.copy()
        batch_x[flip] = batch_x[flip, ::-1]
        running = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            xb = _to_tensor(batch_x[order[lo : lo + cfg.batch_size]], torch.float32)
            opt.zero_grad()
            loss = loss_fn(net(xb), xb)
            if not torch.isfinite(loss):
                raise TrainingFailureError("non-finite training loss", epoch)
            loss.backward()
            opt.step()
            running += loss.item() * len(xb)
        sched.step()
        net.eval()
        with torch.no_grad():
            val = loss_fn(net(x_val), x_val).item()
        if not math.isfinite(val):
            raise TrainingFailureError("non-finite validation loss", epoch)
        model.history.append({"epoch": epoch, "train_mse": running / len(x_train), "val_mse": val})
        log.info("epoch %d train %.3e val %.3e", epoch, running / len(x_train), val)
        if val < best_loss:
            best_loss, since_best = val, 0
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return model


def model_to_bytes(model: AEModel) -> bytes:
    state = model.net.state_dict()
    meta = {
        "arch": model.net.arch(),
        "layers": [[name, list(t.shape)] for name, t in state.items()],
        "normalization": {"center": [float(c) for c in model.center], "scale": [float(v) for v in model.scale]},
        "latent_dim": model.latent_dim,
        "input_vertices": model.input_vertices,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    weights = b"".join(
        t.detach().cpu().numpy().astype("<f4").tobytes() for t in state.values()
    )
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(meta_bytes)) + meta_bytes + weights


def model_from_bytes(buf: bytes) -> AEModel:
    if len(buf) < 12:
        raise FormatError("truncated model header", len(buf))
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    if 12 + meta_len > len(buf):
        raise FormatError("truncated metadata block", 12)
    try:
        meta = json.loads(buf[12 : 12 + meta_len].decode("utf-8"))
        net = StreamlineAE(**meta["arch"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", 12) from exc
    state = net.state_dict()
    pos = 12 + meta_len
    loaded = {}
    for name, shape in meta["layers"]:
        if name not in state or list(state[name].shape) != shape:
            raise FormatError(f"layer {name} {shape} does not match architecture", pos)
        count = int(np.prod(shape))
        if pos + 4 * count > len(buf):
            raise FormatError(f"truncated weights for layer {name}", pos)
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after weights", pos)
    if set(loaded) != set(state):
        raise FormatError("weight block is missing layers", pos)
    net.load_state_dict(loaded)
    net.eval()
    norm = meta["normalization"]
    return AEModel(net, np.asarray(norm["center"], dtype=np.float64), np.asarray(norm["scale"], dtype=np.float64))


def save_model(model: AEModel, path):
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> AEModel:
    return model_from_bytes(Path(path).read_bytes())


def config_dict(cfg) -> dict:
    return asdict(cfg)
