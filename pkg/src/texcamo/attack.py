"""Adversarial camouflage generation.

A random ``n x n`` base pattern is projected into each training view,
masked to the object, re-rendered by the neural renderer, composited over the
original background and scored by the detector.  The batch mean of
``-log(1 - max confidence)`` is minimized with Adam; after every step the
texels are clipped back into ``[0, 1]``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import imageio
from .dataset import AttackSample
from .detector import GradientsUnavailable, differentiable_confidence
from .dtn import extract_features, transform_texture
from .projection import JitterRanges, PoseJitter, calibrate, project

log = logging.getLogger(__name__)


class AttackError(RuntimeError):
    pass


class NonFiniteAttackLoss(AttackError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    texture_side: int = 16
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    jitter: JitterRanges = field(default_factory=JitterRanges)
    conf_clamp: float = 1e-4
    seed: int = 0
    init_low: float = 0.25
    init_high: float = 0.75
    confidence_mode: str = "hard"

    def __post_init__(self):
        if self.texture_side < 1:
            raise AttackError("texture_side must be >= 1")
        if not 0.0 < self.conf_clamp <= 0.01:
            raise AttackError("conf_clamp must be in (0, 0.01]")
        if self.optimizer != "adam":
            raise AttackError(f"unsupported optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise AttackError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if isinstance(d.get("jitter"), dict):
            d["jitter"] = JitterRanges(**d["jitter"])
        return cls(**d)


@dataclass
class AttackState:
    eta_adv_b: torch.Tensor
    step: int = 0
    loss_history: list[float] = field(default_factory=list)


@dataclass
class AttackResult:
    texture: np.ndarray
    epoch_losses: list[float]
    step_losses: list[float]
    initial_texture: np.ndarray


def attack_loss(confidences, conf_clamp: float = 1e-4) -> torch.Tensor:
    """Batch mean of ``-log(1 - C)`` with ``C`` clamped to ``1 - conf_clamp``."""
    c = confidences if isinstance(confidences, torch.Tensor) else torch.as_tensor(confidences, dtype=torch.float64)
    if c.numel() == 0:
        raise AttackError("attack loss of an empty batch")
    c = c.clamp(0.0, 1.0 - conf_clamp)
    return -torch.log1p(-c).mean()


def composite(obj, x_orig, mask):
    """``obj + x_orig * (1 - mask)``; ``obj`` must already be zero off the mask."""
    obj_t = obj if isinstance(obj, torch.Tensor) else torch.as_tensor(np.asarray(obj))
    orig = torch.as_tensor(np.asarray(x_orig)) if not isinstance(x_orig, torch.Tensor) else x_orig
    m = torch.as_tensor(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else mask
    orig = orig.to(obj_t.dtype)
    m = m.to(obj_t.dtype)
    if m.ndim == obj_t.ndim - 1:
        m = m.unsqueeze(-1)
    if obj_t.shape != orig.shape or m.shape[:-1] != obj_t.shape[:-1]:
        raise AttackError(f"shape mismatch: {tuple(obj_t.shape)}, {tuple(orig.shape)}, {tuple(m.shape)}")
    out = obj_t + orig * (1.0 - m)
    return out if isinstance(obj, torch.Tensor) else out.numpy()


def initial_texture(cfg: AttackConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 8675309])
    return rng.uniform(cfg.init_low, cfg.init_high, size=(cfg.texture_side, cfg.texture_side, 3))


def jitter_for(cfg: AttackConfig, jitter_seed: int | None, n: int) -> PoseJitter:
    if jitter_seed is None:
        return PoseJitter.zero()
    return PoseJitter.sample(jitter_seed, n, cfg.jitter)


def _project_masked(texture: torch.Tensor, sample: AttackSample, jitter: PoseJitter, N: int) -> torch.Tensor:
    m = calibrate(sample.pose, jitter, N, texture.shape[0])
    mask = torch.tensor(np.asarray(sample.x_seg.mask), dtype=texture.dtype).unsqueeze(-1)
    return project(texture, m, N) * mask


def render_adversarial(sample: AttackSample, state: AttackState | torch.Tensor, dtn_model, jitter_seed: int | None,
                       cfg: AttackConfig = AttackConfig(), features: torch.Tensor | None = None) -> torch.Tensor:
    """Composited adversarial image ``(N, N, 3)``, differentiable w.r.t. the base texture.

    ``features`` may carry precomputed transformation features of
    ``sample.x_ref``; they do not depend on the texture.
    """
    texture = state.eta_adv_b if isinstance(state, AttackState) else state
    N = sample.x_ref.shape[0]
    eta = _project_masked(texture, sample, jitter_for(cfg, jitter_seed, texture.shape[0]), N)
    tf = extract_features(dtn_model, sample.x_ref) if features is None else features
    mask = torch.tensor(np.asarray(sample.x_seg.mask), dtype=eta.dtype).unsqueeze(-1)
    x_obj = transform_texture(tf.to(eta.dtype), eta) * mask
    return composite(x_obj, torch.as_tensor(sample.x_orig, dtype=eta.dtype), mask)


def step_jitter_seed(cfg: AttackConfig, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, epoch, index]).generate_state(1)[0])


def generate_attack_texture(dataset: list[AttackSample], dtn_model, det, cfg: AttackConfig = AttackConfig(),
                            on_step=None) -> AttackResult:
    """Optimize the base texture against ``det`` over the attack samples.

    ``on_step(step, texture, loss)`` is called after every projected update.
    """
    if not dataset:
        raise AttackError("empty attack dataset")
    if not getattr(det, "supports_gradients", False):
        raise GradientsUnavailable("gradients unavailable: cannot attack a score-only detector")
    dtype = next(dtn_model.parameters()).dtype
    init = initial_texture(cfg)
    state = AttackState(torch.tensor(init, dtype=dtype, requires_grad=True))
    with torch.no_grad():
        feats = [extract_features(dtn_model, torch.as_tensor(s.x_ref, dtype=dtype)) for s in dataset]
    opt = torch.optim.Adam([state.eta_adv_b], lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1234567])
    # only the texture is optimized; skip weight gradients of the detector
    frozen = [p for p in getattr(getattr(det, "net", None), "parameters", lambda: [])() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        epoch_losses = _optimize(dataset, dtn_model, det, cfg, state, opt, rng, feats, on_step)
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return AttackResult(texture=state.eta_adv_b.detach().double().numpy().copy(), epoch_losses=epoch_losses,
                        step_losses=list(state.loss_history), initial_texture=init)


def _optimize(dataset, dtn_model, det, cfg, state, opt, rng, feats, on_step) -> list[float]:
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            imgs = torch.stack([
                render_adversarial(dataset[j], state, dtn_model, step_jitter_seed(cfg, epoch, int(j)), cfg, feats[j])
                for j in idx
            ])
            conf = differentiable_confidence(det, imgs, mode=cfg.confidence_mode)
            loss = attack_loss(conf, cfg.conf_clamp)
            if not torch.isfinite(loss):
                raise NonFiniteAttackLoss(f"non-finite attack loss at epoch {epoch}, step {state.step}: "
                                          f"confidences {conf.detach().tolist()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                state.eta_adv_b.clamp_(0.0, 1.0)
            state.step += 1
            state.loss_history.append(loss.item())
            total += loss.item() * len(idx)
            if on_step is not None:
                on_step(state.step, state.eta_adv_b.detach(), loss.item())
        epoch_losses.append(total / len(dataset))
        log.info("attack epoch %d loss %.5f", epoch, epoch_losses[-1])
    return epoch_losses


@torch.no_grad()
def mean_confidence_with_dtn(dataset: list[AttackSample], dtn_model, det, texture, cfg: AttackConfig = AttackConfig()) -> float:
    """Mean hard-max confidence of ``texture`` rendered through the neural renderer without jitter."""
    dtype = next(dtn_model.parameters()).dtype
    tex = torch.as_tensor(np.asarray(texture), dtype=dtype)
    imgs = torch.stack([render_adversarial(s, tex, dtn_model, None, cfg) for s in dataset])
    return float(differentiable_confidence(det, imgs).mean())


def save_texture(texture: np.ndarray, path, provenance: dict | None = None) -> Path:
    """PNG plus a JSON sidecar recording the side length and provenance."""
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_rgb(path, texture)
    imageio.write_json(path.with_suffix(".json"), {"n": int(np.asarray(texture).shape[0]),
                                                  "provenance": provenance or {}})
    return path


def load_texture(path) -> np.ndarray:
    path = Path(path).with_suffix(".png")
    meta = imageio.read_json(path.with_suffix(".json"))
    tex = imageio.load_rgb(path)
    if tex.shape[0] != meta["n"]:
        raise AttackError(f"texture side {tex.shape[0]} disagrees with sidecar n={meta['n']}")
    return tex


def write_loss_csv(path, epoch_losses: list[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(epoch_losses):
            w.writerow([i, repr(float(v))])
