"""Optimal-transport flow matching with a small 3D convolutional velocity field.

Source samples z0 ~ N(0, I) are joined to data z1 by the straight path
z_tau = (1 - tau) z0 + tau z1 whose velocity is z1 - z0. The velocity model
is three 3x3x3 "same" convolutions with ReLU in between; its input is the
current state, the four spatial conditioning channels, sinusoidal tau
features and a learned modality embedding (the last two broadcast over
space). Gradients are written out by hand.

Arrays carrying several channels use shape (C, nz, ny, nx), or
(B, C, nz, ny, nx) for batches.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .conditioning import SPATIAL_CHANNELS, ConditioningTensor, Modality
from .errors import (CheckpointError, EmptyBatch, EmptyDataset, InvalidInterval,
                     ModelConditioningMismatch, ShapeMismatch)
from .io import atomic_write_bytes

MAGIC = b"TFM1"
_OFFSETS = list(itertools.product(range(3), repeat=3))  # kernel tap k = 9*dz + 3*dy + dx

# stream ids for counter_rng
STREAM_INIT = 1
STREAM_TRAIN = 2
STREAM_SOURCE = 3


def counter_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream, index); reproducible per item."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def source_noise(seed: int, index: int, shape, dtype=np.float64) -> np.ndarray:
    """Standard-normal source sample number ``index`` for ``seed``."""
    return counter_rng(seed, STREAM_SOURCE, index).standard_normal(shape).astype(dtype)


# -- path and target ---------------------------------------------------------

def interpolate(z0: np.ndarray, z1: np.ndarray, tau: float) -> np.ndarray:
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ShapeMismatch(f"z0 {z0.shape} and z1 {z1.shape} differ")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return z0.copy()
    if tau == 1.0:
        return z1.copy()
    return (1.0 - tau) * z0 + tau * z1


def target_velocity(z0: np.ndarray, z1: np.ndarray) -> np.ndarray:
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ShapeMismatch(f"z0 {z0.shape} and z1 {z1.shape} differ")
    return z1 - z0


# -- convolution helpers -------------------------------------------------------
# Activations are channel-last, (B, Z, Y, X, C); im2col rows are voxels and
# columns are (tap, channel) with the channel fastest.

_WORK = threading.local()


def _buffer(role: str, shape: tuple, dtype) -> np.ndarray:
    """Per-thread scratch array reused across calls; large fresh allocations are slow."""
    store = _WORK.__dict__.setdefault("bufs", {})
    key = (role, shape, np.dtype(dtype).str)
    buf = store.get(key)
    if buf is None:
        buf = store[key] = np.zeros(shape, dtype=dtype)
    return buf


def _im2col(x: np.ndarray, role: str | None = None) -> np.ndarray:
    """(B, Z, Y, X, C) -> (B*Z*Y*X, 27*C) with zero padding.

    With ``role`` the result lives in a reused per-thread buffer and stays
    valid only until the next call with the same role and shape.
    """
    b, nz, ny, nx, c = x.shape
    pshape = (b, nz + 2, ny + 2, nx + 2, c)
    oshape = (b, nz, ny, nx, 3, 3, 3, c)
    if role is None:
        xp = np.zeros(pshape, dtype=x.dtype)
        out = np.empty(oshape, dtype=x.dtype)
    else:
        xp = _buffer(role + ":pad", pshape, x.dtype)  # halo is never written, stays zero
        out = _buffer(role, oshape, x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))  # (..., C, 3, 3, 3)
    np.copyto(out, win.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    return out.reshape(-1, 27 * c)


def _flipped(w: np.ndarray) -> np.ndarray:
    """Kernel (out, 27, in) as the (27*out, in) matrix of the adjoint convolution."""
    out_c, _, in_c = w.shape
    return np.ascontiguousarray(w[:, ::-1, :].transpose(1, 0, 2)).reshape(27 * out_c, in_c)


_VALID_CACHE: dict = {}


def _valid_taps(grid_shape, dtype) -> np.ndarray:
    """(V, 27) indicator that a tap lands inside the grid; the im2col of ones."""
    key = (tuple(grid_shape), np.dtype(dtype).str)
    if key not in _VALID_CACHE:
        ones = np.ones((1,) + tuple(grid_shape) + (1,), dtype=dtype)
        _VALID_CACHE[key] = _im2col(ones)
    return _VALID_CACHE[key]


def tau_features(tau: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """(B,) -> (B, 2F): sin then cos of each angular frequency."""
    ang = np.asarray(tau, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def geometric_freqs(n: int, low: float = 0.5, high: float = 50.0) -> np.ndarray:
    if n == 1:
        return np.array([low])
    return low * (high / low) ** (np.arange(n) / (n - 1))


@dataclass
class _Cache:
    cols1: np.ndarray
    const: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    a2: np.ndarray
    cols3: np.ndarray
    mods: np.ndarray
    b: int
    grid: tuple


class VelocityModel:
    """Three-layer 3x3x3 conv velocity field v(z, tau, c).

    Parameters live in one flat vector ``psi`` in the order w1, b1, w2, b2,
    w3, b3, modality embedding. Conv weights have shape (out, 27, in) with
    the tap index k = 9*dz + 3*dy + dx. Layer-1 input channels are ordered
    state, conditioning, tau sin/cos features, modality embedding.
    """

    def __init__(self, data_channels: int = 1, hidden: int = 16, tau_freqs: int = 8,
                 modality_dim: int = 4, n_modalities: int = len(Modality),
                 cond_channels: int = SPATIAL_CHANNELS, rng_seed: int = 0,
                 dtype=np.float64, init: bool = True):
        self.data_channels = int(data_channels)
        self.hidden = int(hidden)
        self.cond_channels = int(cond_channels)
        self.n_modalities = int(n_modalities)
        self.modality_dim = int(modality_dim)
        self.freqs = geometric_freqs(int(tau_freqs))
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self.spatial_in = self.data_channels + self.cond_channels
        self.const_in = 2 * self.freqs.size + self.modality_dim
        c_in = self.spatial_in + self.const_in
        h, c = self.hidden, self.data_channels
        self.layout = [("w1", (h, 27, c_in)), ("b1", (h,)),
                       ("w2", (h, 27, h)), ("b2", (h,)),
                       ("w3", (c, 27, h)), ("b3", (c,)),
                       ("emb", (self.n_modalities, self.modality_dim))]
        self.n_params = sum(int(np.prod(s)) for _, s in self.layout)
        self.psi = np.zeros(self.n_params, dtype=self.dtype)
        if init:
            self._init_weights()

    # parameters --------------------------------------------------------
    def views(self, vec: np.ndarray | None = None) -> dict[str, np.ndarray]:
        vec = self.psi if vec is None else vec
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = vec[i:i + n].reshape(shape)
            i += n
        return out

    def _init_weights(self) -> None:
        rng = counter_rng(self.rng_seed, STREAM_INIT)
        p = self.views()
        for name in ("w1", "w2"):
            w = p[name]
            fan_in = w.shape[1] * w.shape[2]
            w[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / fan_in)
        p["emb"][...] = rng.standard_normal(p["emb"].shape)
        # w3, b3 stay zero: the untrained field is identically zero

    def config(self) -> dict:
        return {"architecture": "conv3x3x3-relu-3layer",
                "channel_plan": [self.spatial_in + self.const_in, self.hidden,
                                 self.hidden, self.data_channels],
                "data_channels": self.data_channels, "hidden": self.hidden,
                "cond_channels": self.cond_channels,
                "tau_embedding": {"kind": "sinusoidal", "freqs": self.freqs.size,
                                  "spacing": "geometric", "low": float(self.freqs[0]),
                                  "high": float(self.freqs[-1])},
                "modality_embedding": {"n_modalities": self.n_modalities,
                                       "dim": self.modality_dim},
                "rng_seed": self.rng_seed}

    @classmethod
    def from_config(cls, cfg: dict, dtype=np.float64) -> "VelocityModel":
        return cls(data_channels=cfg["data_channels"], hidden=cfg["hidden"],
                   tau_freqs=cfg["tau_embedding"]["freqs"],
                   modality_dim=cfg["modality_embedding"]["dim"],
                   n_modalities=cfg["modality_embedding"]["n_modalities"],
                   cond_channels=cfg["cond_channels"], rng_seed=cfg["rng_seed"],
                   dtype=dtype, init=False)

    def copy(self) -> "VelocityModel":
        m = VelocityModel.__new__(VelocityModel)
        m.__dict__.update(self.__dict__)
        m.psi = self.psi.copy()
        return m

    def with_params(self, psi: np.ndarray) -> "VelocityModel":
        m = self.copy()
        psi = np.asarray(psi, dtype=self.dtype)
        if psi.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {psi.shape}")
        m.psi = psi.copy()
        return m

    def astype(self, dtype) -> "VelocityModel":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        m.psi = self.psi.astype(m.dtype)
        return m

    # forward / backward ---------------------------------------------------
    def _forward(self, z, tau, cond, mods, keep: bool = False):
        z = np.asarray(z, dtype=self.dtype)
        cond = np.asarray(cond, dtype=self.dtype)
        b, c = z.shape[:2]
        grid = tuple(z.shape[2:])
        if c != self.data_channels:
            raise ShapeMismatch(f"model expects {self.data_channels} data channels, got {c}")
        if cond.shape != (b, self.cond_channels) + grid:
            raise ModelConditioningMismatch(
                f"conditioning shape {cond.shape} does not match {(b, self.cond_channels) + grid}")
        mods = np.asarray(mods, dtype=np.int64).reshape(b)
        if mods.min() < 0 or mods.max() >= self.n_modalities:
            raise ModelConditioningMismatch("modality code outside the embedding table")
        p = self.views()
        h, s = self.hidden, self.spatial_in
        v = int(np.prod(grid))
        valid = _valid_taps(grid, self.dtype)

        const = np.concatenate([tau_features(np.broadcast_to(tau, (b,)), self.freqs),
                                p["emb"][mods]], axis=1).astype(self.dtype)
        x = np.concatenate([z, cond], axis=1).transpose(0, 2, 3, 4, 1)
        cols1 = _im2col(x, "cols1")
        a1 = cols1 @ p["w1"][:, :, :s].reshape(h, 27 * s).T
        # broadcast channels are constant in space: their conv reduces to valid-tap sums
        tapw = np.einsum("hkc,bc->bkh", p["w1"][:, :, s:], const)
        a1 = a1.reshape(b, v, h)
        for i in range(b):
            a1[i] += valid @ tapw[i]
        a1 += p["b1"]
        a1 = a1.reshape(b * v, h)
        cols2 = _im2col(np.maximum(a1, 0).reshape((b,) + grid + (h,)), "cols2")
        a2 = cols2 @ p["w2"].reshape(h, 27 * h).T + p["b2"]
        cols3 = _im2col(np.maximum(a2, 0).reshape((b,) + grid + (h,)), "cols3")
        out = cols3 @ p["w3"].reshape(c, 27 * h).T + p["b3"]
        out = out.reshape((b,) + grid + (c,)).transpose(0, 4, 1, 2, 3)
        cache = _Cache(cols1, const, a1, cols2, a2, cols3, mods, b, grid) if keep else None
        return np.ascontiguousarray(out), cache

    def _backward(self, g_out: np.ndarray, cache: _Cache) -> np.ndarray:
        p = self.views()
        grad = np.zeros_like(self.psi)
        gp = self.views(grad)
        b, grid = cache.b, cache.grid
        c = self.data_channels
        h, s = self.hidden, self.spatial_in
        v = int(np.prod(grid))
        g = np.ascontiguousarray(g_out.transpose(0, 2, 3, 4, 1)).reshape(b * v, c)

        gp["w3"][...] = (g.T @ cache.cols3).reshape(c, 27, h)
        gp["b3"][...] = g.sum(axis=0)
        dh2 = _im2col(g.reshape((b,) + grid + (c,)), "grad") @ _flipped(p["w3"])
        da2 = dh2 * (cache.a2 > 0)

        gp["w2"][...] = (da2.T @ cache.cols2).reshape(h, 27, h)
        gp["b2"][...] = da2.sum(axis=0)
        dh1 = _im2col(da2.reshape((b,) + grid + (h,)), "grad") @ _flipped(p["w2"])
        da1 = dh1 * (cache.a1 > 0)

        gp["w1"][:, :, :s] = (da1.T @ cache.cols1).reshape(h, 27, s)
        gp["b1"][...] = da1.sum(axis=0)
        valid = _valid_taps(grid, self.dtype)
        da1b = da1.reshape(b, v, h)
        tap = np.stack([valid.T @ da1b[i] for i in range(b)])  # (B, 27, H)
        gp["w1"][:, :, s:] = np.einsum("bkh,bc->hkc", tap, cache.const)
        dconst = np.einsum("hkc,bkh->bc", p["w1"][:, :, s:], tap)
        demb = dconst[:, 2 * self.freqs.size:]
        for i in range(b):  # fixed order keeps accumulation deterministic
            gp["emb"][cache.mods[i]] += demb[i]
        return grad

    def velocity(self, z, tau, cond) -> np.ndarray:
        """Evaluate v(z, tau, c).

        ``z`` is (C, ...) with one ConditioningTensor, or (B, C, ...) with a
        ConditioningTensor shared by all rows or a sequence of B of them.
        ``tau`` is a scalar or a length-B array.
        """
        z = np.asarray(z)
        single = z.ndim == 4
        zb = z[None] if single else z
        arr, mods = stack_conditioning(cond, zb.shape[0])
        out, _ = self._forward(zb, np.asarray(tau, dtype=np.float64), arr, mods)
        return out[0] if single else out

    def loss_and_grad(self, z0, z1, tau, cond, mods) -> tuple[float, np.ndarray]:
        z0 = np.asarray(z0, dtype=self.dtype)
        z1 = np.asarray(z1, dtype=self.dtype)
        tau = np.asarray(tau, dtype=np.float64).reshape(-1)
        t = tau.astype(self.dtype).reshape((-1,) + (1,) * (z0.ndim - 1))
        zt = (1 - t) * z0 + t * z1
        pred, cache = self._forward(zt, tau, cond, mods, keep=True)
        err = pred - (z1 - z0)
        n = err.size
        loss = float(np.sum(err.astype(np.float64) ** 2) / n)
        grad = self._backward((2.0 / n) * err, cache)
        return loss, grad


def stack_conditioning(cond, batch: int) -> tuple[np.ndarray, np.ndarray]:
    """Conditioning as (B, 4, ...) array plus (B,) modality codes."""
    if isinstance(cond, ConditioningTensor):
        arr = np.broadcast_to(cond.channels, (batch,) + cond.channels.shape)
        return arr, np.full(batch, int(cond.modality))
    conds = list(cond)
    if len(conds) != batch:
        raise ModelConditioningMismatch(f"{len(conds)} conditioning tensors for batch {batch}")
    return (np.stack([c.channels for c in conds]),
            np.array([int(c.modality) for c in conds]))


# -- loss -------------------------------------------------------------------------

@dataclass
class FlowSample:
    z0: np.ndarray  # (C, nz, ny, nx)
    z1: np.ndarray
    tau: float
    cond: ConditioningTensor

    def __post_init__(self):
        if np.shape(self.z0) != np.shape(self.z1):
            raise ShapeMismatch("z0 and z1 must have the same shape")
        if np.shape(self.z0)[1:] != self.cond.spec.shape:
            raise ShapeMismatch("samples and conditioning must share a grid")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


def fm_loss(model: VelocityModel, batch: Sequence[FlowSample]) -> tuple[float, np.ndarray]:
    """Mean squared velocity error over batch, channels and voxels, with its exact gradient."""
    batch = list(batch)
    if not batch:
        raise EmptyBatch("fm_loss needs at least one sample")
    z0 = np.stack([s.z0 for s in batch])
    z1 = np.stack([s.z1 for s in batch])
    tau = np.array([s.tau for s in batch])
    cond, mods = stack_conditioning([s.cond for s in batch], len(batch))
    return model.loss_and_grad(z0, z1, tau, cond, mods)


# -- training -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    weight_decay: float = 0.0
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class TrainingPair:
    x1: np.ndarray  # (C, nz, ny, nx)
    cond: ConditioningTensor


@dataclass
class TrainResult:
    model: VelocityModel
    ema: VelocityModel
    losses: list[float] = field(default_factory=list)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def ema_update(ema: np.ndarray, psi: np.ndarray, decay: float) -> np.ndarray:
    return decay * ema + (1.0 - decay) * psi


def train(model: VelocityModel, dataset: Sequence[TrainingPair], cfg: TrainConfig,
          callback=None) -> TrainResult:
    """AdamW with cosine-annealed learning rate and an EMA copy of the weights.

    Every step draws its batch indices, tau ~ U[0, 1] and source noise from a
    generator keyed by (cfg.rng_seed, step), so runs are bitwise repeatable.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("training needs at least one pair")
    dt = model.dtype
    x1 = np.stack([p.x1 for p in dataset]).astype(dt)
    cond, mods = stack_conditioning([p.cond for p in dataset], len(dataset))
    cond = cond.astype(dt)
    model = model.copy()
    ema = model.psi.copy()
    m = np.zeros_like(model.psi)
    v = np.zeros_like(model.psi)
    losses = []
    for step in range(cfg.steps):
        rng = counter_rng(cfg.rng_seed, STREAM_TRAIN, step)
        idx = rng.integers(0, len(dataset), size=cfg.batch)
        tau = rng.random(cfg.batch)
        z0 = rng.standard_normal((cfg.batch,) + x1.shape[1:]).astype(dt)
        loss, g = model.loss_and_grad(z0, x1[idx], tau, cond[idx], mods[idx])
        losses.append(loss)
        lr = cosine_lr(cfg.learning_rate, step, cfg.steps)
        t = step + 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        psi = model.psi - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * model.psi)
        model.psi = psi.astype(dt)
        ema = ema_update(ema, model.psi, cfg.ema_decay).astype(dt)
        if callback is not None:
            callback(step, loss)
    return TrainResult(model, model.with_params(ema), losses)


# -- transport ---------------------------------------------------------------------

def _step(model, z, tau, h, cond, method):
    k1 = model.velocity(z, tau, cond)
    if method == "euler":
        return z + h * k1
    if method == "heun":
        k2 = model.velocity(z + h * k1, tau + h, cond)
        return z + 0.5 * h * (k1 + k2)
    raise ValueError(f"unknown integrator {method!r}")


def integrate_forward(model, z_start, tau_start: float, tau_end: float, steps: int,
                      cond, method: str = "euler") -> np.ndarray:
    """Integrate dz/dtau = v(z, tau, c) from tau_start to tau_end in equal steps."""
    if not (0.0 <= tau_start <= tau_end <= 1.0):
        raise InvalidInterval(f"need 0 <= {tau_start} <= {tau_end} <= 1")
    if steps < 1:
        raise InvalidInterval("steps must be >= 1")
    z = np.array(z_start, copy=True)
    if tau_end == tau_start:
        return z
    h = (tau_end - tau_start) / steps
    for i in range(steps):
        z = _step(model, z, tau_start + i * h, h, cond, method)
    return z


def transport_backward(model, z1, tau_target: float, steps: int, cond,
                       method: str = "euler") -> np.ndarray:
    """Run the same ODE in reverse time from tau = 1 down to ``tau_target``."""
    if not 0.0 <= tau_target <= 1.0:
        raise InvalidInterval(f"tau_target must lie in [0, 1], got {tau_target}")
    if steps < 1:
        raise InvalidInterval("steps must be >= 1")
    z = np.array(z1, copy=True)
    if tau_target == 1.0:
        return z
    h = (1.0 - tau_target) / steps
    for i in range(steps):
        z = _step(model, z, 1.0 - i * h, -h, cond, method)
    return z


def sample(model, cond, seed: int, index: int = 0, steps: int = 50,
           method: str = "euler") -> np.ndarray:
    """Generate one volume stack from source sample (seed, index)."""
    shape = (model.data_channels,) + cond.spec.shape
    z0 = source_noise(seed, index, shape, model.dtype)
    return integrate_forward(model, z0, 0.0, 1.0, steps, cond, method)


# -- checkpoint ---------------------------------------------------------------------

def save_checkpoint(path, model: VelocityModel, ema: VelocityModel | None = None,
                    extra: dict | None = None) -> None:
    """Write magic, u32 header length, JSON header, f32 weights, f32 EMA weights."""
    header = {"schema_version": 1, **model.config(), "n_params": model.n_params,
              "has_ema": ema is not None}
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hb)), hb, model.psi.astype("<f4").tobytes()]
    if ema is not None:
        parts.append(ema.psi.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path, dtype=np.float32) -> tuple[VelocityModel, VelocityModel | None, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if int(header.get("schema_version", 0)) != 1:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    n = int(header["n_params"])
    payload = data[8 + hlen:]
    count = 2 if header.get("has_ema") else 1
    if len(payload) != 4 * n * count:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {4 * n * count}")
    model = VelocityModel.from_config(header, dtype=dtype)
    if model.n_params != n:
        raise CheckpointError(f"{path}: header declares {n} parameters, architecture has {model.n_params}")
    model.psi = np.frombuffer(payload[:4 * n], dtype="<f4").astype(dtype)
    ema = None
    if count == 2:
        ema = model.with_params(np.frombuffer(payload[4 * n:], dtype="<f4").astype(dtype))
    return model, ema, header
