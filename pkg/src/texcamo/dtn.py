"""Neural texture renderer.

A convolutional encoder-decoder reads only the masked reference render and
emits twelve feature channels: four RGB maps ``(sub, add1, mul, add2)``.  The
expected texture never enters the network; it is combined with those maps by
fixed arithmetic, ``((eta - sub + add1) * mul) + add2``, clipped to
``[eps, 1 - eps]``.

All public functions use channels-last images ``(..., N, N, C)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

EPS = 1e-6
ARCHS = ("plain", "residual", "dense")
CHECKPOINT_VERSION = 1


class DtnError(ValueError):
    pass


@dataclass(frozen=True)
class DtnConfig:
    arch: str = "residual"
    k: int = 4
    N: int = 64
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise DtnError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.k < 1:
            raise DtnError("k must be >= 1")
        if self.N < 32 or self.N & (self.N - 1):
            raise DtnError("N must be a power of two >= 32")
        if self.N >> self.k < 1:
            raise DtnError("too many downsampling stages for N")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def _conv(cin, cout, stride=1, kernel=3):
    return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)


class _ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c1 = _conv(ch, ch)
        self.c2 = _conv(ch, ch)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(x + self.c2(self.act(self.c1(x))))


class _DenseBlock(nn.Module):
    def __init__(self, ch, layers=2):
        super().__init__()
        growth = max(ch // 2, 4)
        self.layers = nn.ModuleList(_conv(ch + i * growth, growth) for i in range(layers))
        self.transition = _conv(ch + layers * growth, ch, kernel=1)
        self.act = nn.SiLU()

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(self.act(layer(torch.cat(feats, dim=1))))
        return self.act(self.transition(torch.cat(feats, dim=1)))


class _PlainBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c = _conv(ch, ch)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.c(x))


_BLOCKS = {"plain": _PlainBlock, "residual": _ResidualBlock, "dense": _DenseBlock}


class TransformationNet(nn.Module):
    """Transformation feature extractor.

    ``plain`` is a skip-free encoder-decoder.  ``residual`` adds identity
    shortcuts inside every stage and adds each encoder level into the mirrored
    decoder level; ``dense`` concatenates features inside every stage and
    concatenates each encoder level into the mirrored decoder level.
    """

    def __init__(self, cfg: DtnConfig):
        super().__init__()
        self.cfg = cfg
        block = _BLOCKS[cfg.arch]
        widths = [cfg.base_channels] + [cfg.base_channels * 2 ** i for i in range(cfg.k)]
        self.act = nn.SiLU()
        self.stem = _conv(3, widths[0])
        self.down = nn.ModuleList(_conv(widths[i], widths[i + 1], stride=2) for i in range(cfg.k))
        self.enc_blocks = nn.ModuleList(block(widths[i + 1]) for i in range(cfg.k))
        self.up = nn.ModuleList(_conv(widths[i + 1], widths[i]) for i in range(cfg.k))
        if cfg.arch == "dense":
            self.merge = nn.ModuleList(_conv(2 * widths[i], widths[i], kernel=1) for i in range(cfg.k))
        self.dec_blocks = nn.ModuleList(block(widths[i]) for i in range(cfg.k))
        self.head = _conv(widths[0], 12)
        # near-zero logits start close to the identity transform
        nn.init.normal_(self.head.weight, std=1e-2)
        nn.init.zeros_(self.head.bias)

    def forward(self, x_ref: torch.Tensor) -> torch.Tensor:
        """``(B, 3, N, N)`` reference -> ``(B, 12, N, N)`` bounded features."""
        h = self.act(self.stem(x_ref))
        skips = [h]
        for down, blk in zip(self.down, self.enc_blocks):
            h = blk(self.act(down(h)))
            skips.append(h)
        for i in reversed(range(self.cfg.k)):
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.act(self.up[i](h))
            if self.cfg.arch == "residual":
                h = h + skips[i]
            elif self.cfg.arch == "dense":
                h = self.act(self.merge[i](torch.cat([h, skips[i]], dim=1)))
            h = self.dec_blocks[i](h)
        z = self.head(h)
        sub, add1, mul, add2 = z.split(3, dim=1)
        offset = -math.log(2.0)  # sigmoid(offset) = 1/3 -> 0 on the [-1, 2] range
        return torch.cat([
            -1.0 + 3.0 * torch.sigmoid(sub + offset),
            -1.0 + 3.0 * torch.sigmoid(add1 + offset),
            2.0 * torch.sigmoid(mul),
            -1.0 + 3.0 * torch.sigmoid(add2 + offset),
        ], dim=1)


def build_model(cfg: DtnConfig, dtype=torch.float32) -> TransformationNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = TransformationNet(cfg)
    return model.to(dtype)


def _as_tensor(x, ref: nn.Module | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = next(ref.parameters()).dtype if ref is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def extract_features(model: TransformationNet, x_ref) -> torch.Tensor:
    """Transformation features of a masked reference, ``(..., N, N, 12)``."""
    x = _as_tensor(x_ref, model)
    single = x.ndim == 3
    if single:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise DtnError(f"x_ref must be (N, N, 3) or (B, N, N, 3), got {tuple(x.shape)}")
    N = model.cfg.N
    if x.shape[1] != N or x.shape[2] != N:
        raise DtnError(f"resolution mismatch: model expects {N}, got {tuple(x.shape[1:3])}")
    tf = model(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    return tf[0] if single else tf


def split_features(tf: torch.Tensor):
    """``(F_sub, F_add1, F_mul, F_add2)`` channel slices."""
    if tf.shape[-1] != 12:
        raise DtnError(f"transformation features need 12 channels, got {tf.shape[-1]}")
    return tf[..., 0:3], tf[..., 3:6], tf[..., 6:9], tf[..., 9:12]


class _RecoverableClamp(torch.autograd.Function):
    """Clamp whose gradient still flows at a bound when descent would move the value back inside.

    A plain clamp has zero gradient past its bounds, so a pixel pushed below
    ``eps`` under a non-zero target can never come back.
    """

    @staticmethod
    def forward(ctx, x, lo, hi):
        ctx.save_for_backward(x)
        ctx.lo, ctx.hi = lo, hi
        return x.clamp(lo, hi)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        keep = ((x >= ctx.lo) & (x <= ctx.hi)) | ((x < ctx.lo) & (g < 0)) | ((x > ctx.hi) & (g > 0))
        return g * keep, None, None


def transform_texture(tf, eta_exp, recoverable: bool = False) -> torch.Tensor:
    """``((eta - F_sub + F_add1) * F_mul) + F_add2`` clipped to ``[eps, 1 - eps]``.

    ``recoverable`` only changes the backward pass (see ``_RecoverableClamp``);
    training uses it, gradient checks and the attack use the exact clamp.
    """
    tf = _as_tensor(tf)
    eta = _as_tensor(eta_exp).to(tf.dtype)
    if tf.shape[:-1] != eta.shape[:-1] or eta.shape[-1] != 3:
        raise DtnError(f"shape mismatch: features {tuple(tf.shape)} vs texture {tuple(eta.shape)}")
    f_sub, f_add1, f_mul, f_add2 = split_features(tf)
    raw = (eta - f_sub + f_add1) * f_mul + f_add2
    if recoverable:
        return _RecoverableClamp.apply(raw, EPS, 1.0 - EPS)
    return raw.clamp(EPS, 1.0 - EPS)


def forward(model: TransformationNet, x_ref, eta_exp, recoverable: bool = False) -> torch.Tensor:
    return transform_texture(extract_features(model, x_ref), eta_exp, recoverable)


def _weights_bytes(model: nn.Module) -> bytes:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getvalue()


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_model(model: TransformationNet, path, provenance: dict | None = None) -> Path:
    """Write ``<path>.pt`` plus a ``<path>.json`` sidecar; returns the sidecar path."""
    path = Path(path).with_suffix("")
    blob = _weights_bytes(model)
    path.with_suffix(".pt").write_bytes(blob)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "config_hash": model.cfg.digest(),
        "weights_sha256": weights_digest(model),
        "dtype": str(next(model.parameters()).dtype),
        "provenance": provenance or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_model(path) -> TransformationNet:
    path = Path(path).with_suffix("")
    try:
        sidecar = json.loads(path.with_suffix(".json").read_text())
    except FileNotFoundError as e:
        raise DtnError(f"missing checkpoint sidecar {path.with_suffix('.json')}") from e
    if sidecar.get("version") != CHECKPOINT_VERSION:
        raise DtnError(f"unsupported checkpoint version {sidecar.get('version')}")
    cfg = DtnConfig(**sidecar["config"])
    if cfg.digest() != sidecar["config_hash"]:
        raise DtnError("checkpoint config hash mismatch")
    dtype = torch.float64 if sidecar.get("dtype") == "torch.float64" else torch.float32
    model = build_model(cfg, dtype=dtype)
    state = torch.load(io.BytesIO(path.with_suffix(".pt").read_bytes()), weights_only=True)
    model.load_state_dict(state)
    if weights_digest(model) != sidecar["weights_sha256"]:
        raise DtnError("checkpoint weights do not match their recorded hash")
    model.eval()
    return model
