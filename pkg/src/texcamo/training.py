"""DTN training, evaluation and the architecture sweep."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import DtnSample, stack
from .dtn import EPS, DtnConfig, build_model, forward

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("arch", "k", "seed", "test_bce", "test_mse", "test_mae")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise TrainingError("learning_rate must be > 0")
        if self.optimizer != "adam":
            raise TrainingError(f"unsupported optimizer {self.optimizer!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise TrainingError("grad_clip must be > 0 or None")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    final_train: dict = field(default_factory=dict)
    final_val: dict | None = None
    final_test: dict | None = None
    wall_clock_s: float = 0.0
    dtn_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        # wall clock is kept out so reruns give byte-identical metrics; callers record it in provenance
        body = {k: v for k, v in self.to_dict().items() if k != "wall_clock_s"}
        (d / "train_report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        cols = ["epoch", "train_bce", "train_mse", "train_mae", "val_bce", "val_mse", "val_mae"]
        with open(d / "train_epochs.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.epochs:
                w.writerow({c: row.get(c, "") for c in cols})


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def bce_loss(pred, target) -> torch.Tensor:
    """Mean per-element binary cross-entropy; ``pred`` is clamped to ``[eps, 1-eps]``."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    _check_shapes(pred, target)
    p = pred.clamp(EPS, 1.0 - EPS)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def mse(pred, target) -> torch.Tensor:
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    _check_shapes(pred, target)
    return ((pred - target.to(pred.dtype)) ** 2).mean()


def mae(pred, target) -> torch.Tensor:
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    _check_shapes(pred, target)
    return (pred - target.to(pred.dtype)).abs().mean()


def minimal_bce(targets) -> float:
    """Lowest achievable mean BCE for ``targets`` (their mean binary entropy)."""
    t = torch.as_tensor(np.asarray(targets), dtype=torch.float64)
    return float(bce_loss(t, t))


def _tensors(samples: list[DtnSample], dtype):
    return tuple(torch.as_tensor(stack(samples, f), dtype=dtype) for f in ("x_ref", "eta_exp", "x_ren"))


def split_by_scene(samples: list[DtnSample], val_fraction: float, seed: int):
    """Hold out whole scenes (never single colours) for validation."""
    ids = sorted({s.scene_ref.scene_id for s in samples})
    n_val = int(round(len(ids) * val_fraction))
    if n_val == 0 or n_val >= len(ids):
        return list(samples), []
    rng = np.random.default_rng([seed, 17])
    val_ids = set(rng.choice(ids, size=n_val, replace=False).tolist())
    train = [s for s in samples if s.scene_ref.scene_id not in val_ids]
    val = [s for s in samples if s.scene_ref.scene_id in val_ids]
    return train, val


@torch.no_grad()
def evaluate(model, samples: list[DtnSample], batch_size: int = 50) -> dict:
    """Mean BCE / MSE / MAE over the samples (each sample weighted equally)."""
    if not samples:
        raise TrainingError("cannot evaluate on an empty set")
    dtype = next(model.parameters()).dtype
    per = {"bce": [], "mse": [], "mae": []}
    for i in range(0, len(samples), batch_size):
        x_ref, eta, target = _tensors(samples[i:i + batch_size], dtype)
        pred = forward(model, x_ref, eta).double()
        target = target.double()
        for j in range(pred.shape[0]):
            per["bce"].append(float(bce_loss(pred[j], target[j])))
            per["mse"].append(float(mse(pred[j], target[j])))
            per["mae"].append(float(mae(pred[j], target[j])))
    return {k: float(np.mean(np.sort(v))) for k, v in per.items()}


def train(dataset: list[DtnSample], dtn_cfg: DtnConfig, train_cfg: TrainConfig = TrainConfig(),
          test: list[DtnSample] | None = None, dtype=torch.float32):
    """Minibatch Adam on per-pixel BCE.  Returns ``(model, TrainReport)``."""
    if not dataset:
        raise TrainingError("empty training dataset")
    start = time.perf_counter()
    train_set, val_set = split_by_scene(dataset, train_cfg.val_fraction, train_cfg.seed)
    model = build_model(dtn_cfg, dtype=dtype)
    report = TrainReport(dtn_config=asdict(dtn_cfg), train_config=asdict(train_cfg))
    x_ref, eta, target = _tensors(train_set, dtype)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                           betas=(train_cfg.adam_beta1, train_cfg.adam_beta2), eps=train_cfg.adam_eps)
    rng = np.random.default_rng([train_cfg.seed, 29])
    n = x_ref.shape[0]
    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_cfg.seed)
        for epoch in range(train_cfg.epochs):
            model.train()
            order = torch.from_numpy(rng.permutation(n))
            sums = {"bce": 0.0, "mse": 0.0, "mae": 0.0}
            for i in range(0, n, train_cfg.batch_size):
                idx = order[i:i + train_cfg.batch_size]
                pred = forward(model, x_ref[idx], eta[idx], recoverable=True)
                loss = bce_loss(pred, target[idx])
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                # single near-zero predictions under dark targets give huge BCE gradients
                if train_cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                step += 1
                w = idx.numel()
                with torch.no_grad():
                    sums["bce"] += loss.item() * w
                    sums["mse"] += mse(pred, target[idx]).item() * w
                    sums["mae"] += mae(pred, target[idx]).item() * w
            row = {"epoch": epoch, **{f"train_{k}": v / n for k, v in sums.items()}}
            model.eval()
            if val_set:
                row.update({f"val_{k}": v for k, v in evaluate(model, val_set).items()})
            report.epochs.append(row)
            log.info("epoch %d %s", epoch, {k: round(v, 6) for k, v in row.items() if k != "epoch"})
    model.eval()
    report.final_train = evaluate(model, train_set)
    if val_set:
        report.final_val = evaluate(model, val_set)
    if test:
        report.final_test = evaluate(model, test)
    report.wall_clock_s = time.perf_counter() - start
    return model, report


@dataclass
class SweepReport:
    rows: list[dict]
    summary: list[dict]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(SWEEP_COLUMNS))
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r[c] for c in SWEEP_COLUMNS})

    def write_plot_data(self, path) -> None:
        Path(path).write_text(json.dumps({"summary": self.summary}, indent=2, sort_keys=True) + "\n")


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and population std of test metrics per ``(arch, k)``."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["arch"], r["k"]), []).append(r)
    out = []
    for (arch, k), rs in groups.items():
        entry = {"arch": arch, "k": k, "runs": len(rs)}
        for m in ("test_bce", "test_mse", "test_mae"):
            vals = [float(r[m]) for r in rs]
            entry[f"{m}_mean"] = statistics.fmean(vals)
            entry[f"{m}_std"] = statistics.pstdev(vals)
        out.append(entry)
    return out


def architecture_sweep(train_set, test_set, configs: list[DtnConfig], seeds: list[int],
                       train_cfg: TrainConfig = TrainConfig()) -> SweepReport:
    """Train every config once per seed and score it on the test set."""
    if not configs:
        raise TrainingError("sweep needs at least one config")
    if not seeds:
        raise TrainingError("sweep needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise TrainingError(f"duplicate seeds in sweep: {seeds}")
    rows = []
    for cfg in configs:
        for seed in seeds:
            model, report = train(train_set, replace(cfg, seed=seed), replace(train_cfg, seed=seed), test=test_set)
            rows.append({"arch": cfg.arch, "k": cfg.k, "seed": seed,
                         **{f"test_{m}": v for m, v in report.final_test.items()}})
            log.info("sweep %s k=%d seed=%d -> %s", cfg.arch, cfg.k, seed, rows[-1])
    return SweepReport(rows=rows, summary=summarize_sweep(rows))
