"""Target detectors.

``ToyDetector`` is a small single-class grid detector trained on oracle
scenes.  Every ``stride x stride`` cell predicts an objectness score and a box;
detections are the cells above a score threshold after non-maximum
suppression.  The dense score map is differentiable w.r.t. the input image,
which is what the attack optimizes against.

``ExternalDetector`` wraps any outside detector through files: it writes the
images as PNGs, hands a JSON list of paths to a command, and reads back a JSON
array holding, per image, a list of ``{box: [x0, y0, x1, y1], class_id, score}``.
It is score-only.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import imageio
from .boxes import Box, iou
from .scene import object_box, render, segment

log = logging.getLogger(__name__)

CAR_CLASS_ID = 2
CHECKPOINT_VERSION = 1


class DetectorError(RuntimeError):
    pass


class GradientsUnavailable(DetectorError):
    pass


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DetectorError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"box": self.box.as_list(), "class_id": self.class_id, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(Box(*map(float, d["box"])), int(d["class_id"]), float(d["score"]))


@dataclass(frozen=True)
class DetectorConfig:
    N: int = 64
    stride: int = 8
    width: int = 32
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    target_class_id: int = CAR_CLASS_ID
    score_threshold: float = 0.25
    nms_iou: float = 0.5
    heatmap_sigma: float = 0.6
    box_loss_weight: float = 1.0
    ap_floor: float | None = 0.9

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


class GridDetectorNet(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        w = cfg.width
        layers: list[nn.Module] = [nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU()]
        cin = w // 2
        for i in range(int(np.log2(cfg.stride))):
            cout = w * 2 ** min(i, 1)
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.SiLU(),
                       nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU()]
            cin = cout
        self.backbone = nn.Sequential(*layers)
        self.context = nn.Sequential(nn.Conv2d(cin, cin, 3, padding=2, dilation=2), nn.SiLU())
        self.head = nn.Conv2d(cin, 5, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, N, N)`` -> ``(B, 5, N/stride, N/stride)`` raw head outputs."""
        h = self.backbone(x)
        return self.head(h + self.context(h))


class ToyDetector:
    kind = "toy"
    supports_gradients = True

    def __init__(self, cfg: DetectorConfig, net: GridDetectorNet | None = None):
        self.cfg = cfg
        self.N = cfg.N
        self.target_class_id = cfg.target_class_id
        if net is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed)
                net = GridDetectorNet(cfg)
        self.net = net.eval()

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def to(self, dtype) -> "ToyDetector":
        self.net = self.net.to(dtype)
        return self

    def _batch(self, images) -> torch.Tensor:
        x = images if isinstance(images, torch.Tensor) else torch.as_tensor(np.asarray(images))
        x = x.to(self.dtype)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise DetectorError(f"images must be (N, N, 3) or (B, N, N, 3), got {tuple(x.shape)}")
        if x.shape[1] != self.N or x.shape[2] != self.N:
            raise DetectorError(f"resolution mismatch: detector expects {self.N}, got {tuple(x.shape[1:3])}")
        return x

    def raw(self, images) -> torch.Tensor:
        return self.net(self._batch(images).permute(0, 3, 1, 2))

    def score_map(self, images) -> torch.Tensor:
        """Pre-NMS target-class scores ``(B, H, W)``; differentiable."""
        return torch.sigmoid(self.raw(images)[:, 0])

    def decode_boxes(self, out: torch.Tensor) -> torch.Tensor:
        """Boxes ``(B, H, W, 4)`` as ``(x0, y0, x1, y1)`` pixels."""
        s = float(self.cfg.stride)
        _, _, h, w = out.shape
        gy, gx = torch.meshgrid(torch.arange(h, dtype=out.dtype), torch.arange(w, dtype=out.dtype), indexing="ij")
        cx = (gx + 0.5 + 2.0 * torch.tanh(out[:, 1])) * s - 0.5
        cy = (gy + 0.5 + 2.0 * torch.tanh(out[:, 2])) * s - 0.5
        bw = s * torch.exp(out[:, 3].clamp(-4, 4))
        bh = s * torch.exp(out[:, 4].clamp(-4, 4))
        return torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)

    @torch.no_grad()
    def detect_many(self, images, batch_size: int = 256) -> list[list[Detection]]:
        x = self._batch(images)
        results = []
        for i in range(0, x.shape[0], batch_size):
            out = self.net(x[i:i + batch_size].permute(0, 3, 1, 2))
            scores = torch.sigmoid(out[:, 0]).double().numpy()
            boxes = self.decode_boxes(out).double().numpy()
            for sc, bx in zip(scores, boxes):
                results.append(self._nms(sc.reshape(-1), bx.reshape(-1, 4)))
        return results

    def detect(self, image) -> list[Detection]:
        return self.detect_many(image)[0]

    def _nms(self, scores: np.ndarray, boxes: np.ndarray) -> list[Detection]:
        keep = np.flatnonzero(scores >= self.cfg.score_threshold)
        keep = keep[np.argsort(-scores[keep], kind="stable")]
        dets: list[Detection] = []
        for j in keep:
            b = boxes[j]
            box = Box(float(b[0]), float(b[1]), float(max(b[0], b[2])), float(max(b[1], b[3])))
            if all(iou(box, d.box) <= self.cfg.nms_iou for d in dets):
                dets.append(Detection(box, self.target_class_id, float(scores[j])))
        return dets

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path, provenance: dict | None = None) -> Path:
        path = Path(path).with_suffix("")
        buf = io.BytesIO()
        torch.save(self.net.state_dict(), buf)
        path.with_suffix(".pt").write_bytes(buf.getvalue())
        sidecar = {"version": CHECKPOINT_VERSION, "kind": self.kind, "config": asdict(self.cfg),
                   "config_hash": self.cfg.digest(), "weights_sha256": self.weights_digest(),
                   "provenance": provenance or {}}
        imageio.write_json(path.with_suffix(".json"), sidecar)
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "ToyDetector":
        path = Path(path).with_suffix("")
        try:
            sidecar = imageio.read_json(path.with_suffix(".json"))
        except FileNotFoundError as e:
            raise DetectorError(f"missing detector sidecar {path.with_suffix('.json')}") from e
        cfg = DetectorConfig(**sidecar["config"])
        if cfg.digest() != sidecar["config_hash"]:
            raise DetectorError("detector config hash mismatch")
        det = cls(cfg)
        det.net.load_state_dict(torch.load(io.BytesIO(path.with_suffix(".pt").read_bytes()), weights_only=True))
        if det.weights_digest() != sidecar["weights_sha256"]:
            raise DetectorError("detector weights do not match their recorded hash")
        return det


class ExternalDetector:
    """File-based adapter; ``command`` gets the request and response JSON paths appended."""

    kind = "external"
    supports_gradients = False

    def __init__(self, command: list[str], N: int, target_class_id: int = CAR_CLASS_ID, workdir=None):
        self.command = list(command)
        self.N = N
        self.target_class_id = target_class_id
        self.workdir = Path(workdir) if workdir else None

    def detect_many(self, images) -> list[list[Detection]]:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:3] != (self.N, self.N):
            raise DetectorError(f"resolution mismatch: detector expects {self.N}, got {images.shape[1:3]}")
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            tmp = Path(tmp)
            paths = []
            for i, img in enumerate(images):
                p = tmp / f"image_{i:05d}.png"
                imageio.save_rgb(p, img)
                paths.append(str(p))
            request, response = tmp / "request.json", tmp / "response.json"
            request.write_text(json.dumps(paths))
            proc = subprocess.run(self.command + [str(request), str(response)], capture_output=True, text=True)
            if proc.returncode != 0:
                raise DetectorError(f"external detector failed ({proc.returncode}): {proc.stderr.strip()}")
            data = json.loads(response.read_text())
        if len(data) != len(paths):
            raise DetectorError(f"external detector answered {len(data)} images, expected {len(paths)}")
        return [[Detection.from_dict(d) for d in per_image] for per_image in data]

    def detect(self, image) -> list[Detection]:
        return self.detect_many(image)[0]

    def score_map(self, images):
        raise GradientsUnavailable("gradients unavailable: external detectors are score-only")


def detect(det, image) -> list[Detection]:
    return det.detect(image)


def max_target_confidence(dets: list[Detection], target: int) -> float:
    return max((d.score for d in dets if d.class_id == target), default=0.0)


def differentiable_confidence(det, images, mode: str = "hard", temperature: float = 0.05) -> torch.Tensor:
    """Per-image target confidence from the pre-NMS score map.

    ``hard`` is the exact maximum; ``smooth`` is a softmax-weighted mean of the
    map, which never exceeds the maximum.
    """
    if not getattr(det, "supports_gradients", False):
        raise GradientsUnavailable("gradients unavailable: detector is score-only")
    scores = det.score_map(images)
    flat = scores.reshape(scores.shape[0], -1)
    if mode == "hard":
        return flat.max(dim=1).values
    if mode == "smooth":
        w = torch.softmax(flat / temperature, dim=1)
        return (w * flat).sum(dim=1)
    raise DetectorError(f"unknown confidence mode {mode!r}")


def _targets(boxes: list[Box], cfg: DetectorConfig):
    g = cfg.N // cfg.stride
    s = float(cfg.stride)
    heat = np.zeros((len(boxes), g, g))
    reg = np.zeros((len(boxes), 4, g, g))
    weight = np.zeros((len(boxes), g, g))
    gy, gx = np.mgrid[0:g, 0:g].astype(np.float64)
    for b, box in enumerate(boxes):
        cx = (box.x_min + box.x_max) / 2.0
        cy = (box.y_min + box.y_max) / 2.0
        fx, fy = (cx + 0.5) / s, (cy + 0.5) / s
        i, j = min(int(fy), g - 1), min(int(fx), g - 1)
        d2 = (gx + 0.5 - fx) ** 2 + (gy + 0.5 - fy) ** 2
        heat[b] = np.exp(-d2 / (2 * cfg.heatmap_sigma ** 2))
        heat[b, i, j] = 1.0
        bw = max(box.x_max - box.x_min, 1.0)
        bh = max(box.y_max - box.y_min, 1.0)
        # neighbouring cells regress the same box so NMS can merge them
        reg[b, 0] = fx - gx - 0.5
        reg[b, 1] = fy - gy - 0.5
        reg[b, 2] = np.log(bw / s)
        reg[b, 3] = np.log(bh / s)
        weight[b] = d2 <= 2.0
        weight[b, i, j] = 1.0
    return (torch.as_tensor(heat, dtype=torch.float32), torch.as_tensor(reg, dtype=torch.float32),
            torch.as_tensor(weight, dtype=torch.float32))


def make_training_images(scenes, textures, renders_per_scene: int, seed: int, N: int):
    rng = np.random.default_rng([seed, 4242])
    images, boxes = [], []
    for scene in scenes:
        for _ in range(renders_per_scene):
            tex = textures[int(rng.integers(len(textures)))]
            images.append(render(scene, tex, N))
            boxes.append(object_box(segment(scene, N)))
    return np.stack(images), boxes


def detector_loss(det: ToyDetector, images: torch.Tensor, heat, reg, weight) -> torch.Tensor:
    out = det.net(images.permute(0, 3, 1, 2))
    obj = nn.functional.binary_cross_entropy_with_logits(out[:, 0], heat, reduction="none")
    # positives are rare; up-weight the neighbourhood of each object
    obj = (obj * (1.0 + 4.0 * heat)).mean()
    pred_off = 2.0 * torch.tanh(out[:, 1:3])
    pred_size = out[:, 3:5]
    box_err = (pred_off - reg[:, 0:2]).abs().sum(1) + (pred_size - reg[:, 2:4]).abs().sum(1)
    box = (box_err * weight).sum() / weight.sum().clamp(min=1.0)
    return obj + det.cfg.box_loss_weight * box


def train_toy_detector(scenes, textures, cfg: DetectorConfig = DetectorConfig(), holdout=None,
                       renders_per_scene: int = 2) -> ToyDetector:
    """Train a toy detector; ``holdout`` is ``(scenes, texture)`` for the AP floor check."""
    if len(scenes) < 10:
        raise DetectorError("need at least 10 training scenes")
    textures = [np.asarray(t, dtype=np.float64) for t in textures]
    det = ToyDetector(cfg)
    if cfg.epochs == 0:
        return det
    images, boxes = make_training_images(scenes, textures, renders_per_scene, cfg.seed, cfg.N)
    x = torch.as_tensor(images, dtype=torch.float32)
    heat, reg, weight = _targets(boxes, cfg)
    opt = torch.optim.Adam(det.net.parameters(), lr=cfg.learning_rate)
    steps_per_epoch = -(-x.shape[0] // cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.learning_rate,
                                                total_steps=cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng([cfg.seed, 99])
    det.net.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.epochs):
            order = torch.from_numpy(rng.permutation(x.shape[0]))
            total = 0.0
            for i in range(0, x.shape[0], cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                loss = detector_loss(det, x[idx], heat[idx], reg[idx], weight[idx])
                if not torch.isfinite(loss):
                    raise DetectorError(f"non-finite detector loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * idx.numel()
            log.info("detector epoch %d loss %.5f", epoch, total / x.shape[0])
    det.net.eval()
    if holdout is not None and cfg.ap_floor is not None:
        from .evaluation import average_precision

        hold_scenes, hold_tex = holdout
        imgs = np.stack([render(s, hold_tex, cfg.N) for s in hold_scenes])
        gts = [[object_box(segment(s, cfg.N))] for s in hold_scenes]
        ap = average_precision(det.detect_many(imgs), gts, class_id=cfg.target_class_id)
        if ap < cfg.ap_floor:
            raise DetectorError(f"held-out AP@0.5 {ap:.3f} below floor {cfg.ap_floor} "
                                f"after {cfg.epochs} epochs on {len(images)} images")
        det.holdout_ap = ap
    return det
