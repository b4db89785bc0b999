"""``texcamo`` command line: dataset -> DTN -> detector -> attack -> evaluation -> report.

Every stage reads its inputs from ``<out>/<stage>/`` directories written by
earlier stages and leaves a ``provenance.json`` next to its artifacts.

Exit codes: 0 ok, 2 bad config, 3 IO failure, 4 missing upstream artifact,
5 non-finite loss.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__, imageio
from .attack import AttackConfig, AttackError, NonFiniteAttackLoss, generate_attack_texture, load_texture, \
    save_texture, write_loss_csv
from .dataset import (REFERENCE_COLOR, DatasetError, build_attack_dataset, build_dtn_split, load_dataset,
                      random_colors, save_dataset)
from .detector import DetectorConfig, DetectorError, ToyDetector, train_toy_detector
from .dtn import DtnConfig, DtnError, load_model, save_model
from .evaluation import PoseGrid, emit_report, pose_grid_eval, read_report_csv
from .projection import JitterRanges
from .scene import sample_scene
from .textures import detector_training_textures, normal_texture, random_texture
from .training import NonFiniteLossError, TrainConfig, train

log = logging.getLogger("texcamo")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4, 5

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "oracle": {"N": 64},
    "dataset": {
        "train_scenes": 40, "test_scenes": 20, "train_colors": 20, "test_colors": 10,
        "attack_scenes": 64, "reference_color": list(REFERENCE_COLOR),
    },
    "dtn": {"arch": "residual", "k": 4, "base_channels": 16},
    "dtn_training": {"batch_size": 32, "epochs": 25, "learning_rate": 1e-3},
    "detector": {
        "scenes": 600, "textures": 60, "pattern_fraction": 0.3, "holdout_scenes": 40,
        "distance_range": [4.5, 16.0], "pitch_range": [0.0, 35.0], "epochs": 30,
    },
    "attack": {"texture_side": 16, "epochs": 200, "batch_size": 32, "learning_rate": 0.01},
    "evaluation": {
        "scenes": 20, "distances": [5.0, 10.0, 15.0], "pitches": [0.0, 15.0, 30.0], "yaw_step": 30.0,
        "textures": ["normal", "random", "dta"],
    },
}

STAGES = ("dataset", "dtn", "detector", "attack", "evaluation", "report")
# sections forwarded to a config dataclass; their extra keys are checked against its fields later
OPEN_SECTIONS = ("dtn", "dtn_training", "detector", "attack")


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed from the global seed and the stage name."""
    return int(np.random.SeedSequence([int(seed), *stage.encode()]).generate_state(1)[0] & 0x7FFFFFFF)


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in base:
            if where.rstrip(".") in OPEN_SECTIONS:
                out[k] = v
                continue
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(path=None, overrides=(), seed=None, out=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for item in overrides:
        keys, value = _parse_override(item)
        patch = value
        for k in reversed(keys):
            patch = {k: patch}
        cfg = _merge(cfg, patch)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = str(out)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def _build(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"{cls.__name__} has no fields {sorted(unknown)}")
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError, RuntimeError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def scene_plan(cfg: dict) -> dict[str, list[int]]:
    """Disjoint scene seeds for every consumer, all drawn from one stream."""
    d, det, ev = cfg["dataset"], cfg["detector"], cfg["evaluation"]
    sizes = {"dtn_train": d["train_scenes"], "dtn_test": d["test_scenes"], "attack": d["attack_scenes"],
             "detector": det["scenes"], "detector_holdout": det["holdout_scenes"], "evaluation": ev["scenes"]}
    for k, v in sizes.items():
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"scene count for {k} must be a non-negative integer")
    rng = np.random.default_rng(stage_seed(cfg["seed"], "scenes"))
    ids = rng.choice(2 ** 31 - 1, size=sum(sizes.values()), replace=False).tolist()
    plan, i = {}, 0
    for k, n in sizes.items():
        plan[k] = ids[i:i + n]
        i += n
    return plan


def _config_hash(cfg: dict) -> str:
    return imageio.json_sha256({k: v for k, v in cfg.items() if k != "out"})


def _hash_tree(path: Path) -> dict[str, str]:
    if path.is_file():
        return {path.name: imageio.file_sha256(path)}
    return {str(p.relative_to(path)): imageio.file_sha256(p) for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "provenance.json"}


def write_provenance(directory: Path, stage: str, cfg: dict, upstream: dict[str, Path], **extra) -> None:
    upstream_hashes = {}
    for name, p in upstream.items():
        for rel, h in _hash_tree(p).items():
            upstream_hashes[f"{name}/{rel}"] = h
    imageio.write_json(directory / "provenance.json", {
        "stage": stage, "seed": cfg["seed"], "stage_seed": stage_seed(cfg["seed"], stage),
        "config": cfg, "config_hash": _config_hash(cfg), "upstream": upstream_hashes,
        "package_version": __version__, "created_unix": time.time(), **extra,
    })


def _dirs(cfg: dict) -> dict[str, Path]:
    root = Path(cfg["out"])
    return {s: root / s for s in STAGES}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact: {what} ({path})")
    return path


def cmd_gen_dataset(cfg: dict) -> Path:
    N = cfg["oracle"]["N"]
    d = cfg["dataset"]
    seed = stage_seed(cfg["seed"], "dataset")
    plan = scene_plan(cfg)
    ref = tuple(d["reference_color"])
    train_colors = [ref] + random_colors(d["train_colors"] - 1, seed)
    test_colors = random_colors(d["test_colors"], seed + 1)
    train_set, test_set = build_dtn_split([sample_scene(s) for s in plan["dtn_train"]],
                                          [sample_scene(s) for s in plan["dtn_test"]],
                                          train_colors, test_colors, ref, N)
    attack_set = build_attack_dataset([sample_scene(s) for s in plan["attack"]], ref, N)
    out = _dirs(cfg)["dataset"]
    summary = {}
    for name, samples in (("dtn_train", train_set), ("dtn_test", test_set), ("attack", attack_set)):
        m = save_dataset(samples, out / name)
        summary[name] = {"count": len(samples), "manifest_sha256": imageio.file_sha256(m)}
    write_provenance(out, "dataset", cfg, {})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return out


def cmd_train_dtn(cfg: dict) -> Path:
    dirs = _dirs(cfg)
    seed = stage_seed(cfg["seed"], "dtn")
    dtn_cfg = _build(DtnConfig, cfg["dtn"], N=cfg["oracle"]["N"], seed=seed)
    train_cfg = _build(TrainConfig, cfg["dtn_training"], seed=seed)
    train_dir = _require(dirs["dataset"] / "dtn_train" / "manifest.json", "DTN training dataset").parent
    test_dir = dirs["dataset"] / "dtn_test"
    train_set = load_dataset(train_dir)
    test_set = load_dataset(test_dir) if (test_dir / "manifest.json").exists() else None
    model, report = train(train_set, dtn_cfg, train_cfg, test=test_set)
    out = dirs["dtn"]
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "dtn")
    report.write(out)
    write_provenance(out, "dtn", cfg, {"dtn_train": train_dir / "manifest.json"}, wall_clock_s=report.wall_clock_s)
    print(json.dumps({"final_train": report.final_train, "final_test": report.final_test}, sort_keys=True))
    return out


def cmd_train_detector(cfg: dict) -> Path:
    c = dict(cfg["detector"])
    n_tex, frac = c.pop("textures"), c.pop("pattern_fraction")
    d_range, p_range = tuple(c.pop("distance_range")), tuple(c.pop("pitch_range"))
    c.pop("scenes"), c.pop("holdout_scenes")
    seed = stage_seed(cfg["seed"], "detector")
    det_cfg = _build(DetectorConfig, c, N=cfg["oracle"]["N"], seed=seed)
    plan = scene_plan(cfg)
    scenes = [sample_scene(s, distance_range=d_range, pitch_range=p_range) for s in plan["detector"]]
    holdout = [sample_scene(s) for s in plan["detector_holdout"]]
    textures = detector_training_textures(n_tex, seed, pattern_fraction=frac)
    det = train_toy_detector(scenes, textures, det_cfg, holdout=(holdout, normal_texture()) if holdout else None)
    out = _dirs(cfg)["detector"]
    out.mkdir(parents=True, exist_ok=True)
    det.save(out / "detector")
    ap = getattr(det, "holdout_ap", None)
    imageio.write_json(out / "detector_report.json", {"holdout_ap50_normal": ap, "holdout_scenes": len(holdout)})
    write_provenance(out, "detector", cfg, {})
    print(json.dumps({"holdout_ap50_normal": ap}))
    return out


def _attack_config(cfg: dict) -> AttackConfig:
    a = dict(cfg["attack"])
    if isinstance(a.get("jitter"), dict):
        a["jitter"] = _build(JitterRanges, a["jitter"])
    return _build(AttackConfig, a, seed=stage_seed(cfg["seed"], "attack"))


def cmd_attack(cfg: dict) -> Path:
    dirs = _dirs(cfg)
    att_cfg = _attack_config(cfg)
    data_dir = _require(dirs["dataset"] / "attack" / "manifest.json", "attack dataset").parent
    dtn_path = _require(dirs["dtn"] / "dtn.json", "DTN checkpoint")
    det_path = _require(dirs["detector"] / "detector.json", "detector checkpoint")
    samples = load_dataset(data_dir)
    model = load_model(dtn_path)
    det = ToyDetector.load(det_path)
    for p in model.parameters():
        p.requires_grad_(False)
    result = generate_attack_texture(samples, model, det, att_cfg)
    out = dirs["attack"]
    out.mkdir(parents=True, exist_ok=True)
    save_texture(result.texture, out / "texture", {"config": att_cfg.to_dict()})
    write_loss_csv(out / "attack_loss.csv", result.epoch_losses)
    write_provenance(out, "attack", cfg, {"attack": data_dir / "manifest.json", "dtn": dtn_path,
                                          "detector": det_path})
    print(json.dumps({"epochs": att_cfg.epochs, "final_loss": result.epoch_losses[-1] if result.epoch_losses else None}))
    return out


def cmd_evaluate(cfg: dict) -> Path:
    dirs = _dirs(cfg)
    ev = cfg["evaluation"]
    n = cfg["attack"]["texture_side"]
    det_path = _require(dirs["detector"] / "detector.json", "detector checkpoint")
    det = ToyDetector.load(det_path)
    upstream = {"detector": det_path}
    textures = {}
    for name in ev["textures"]:
        if name == "normal":
            textures[name] = normal_texture(n)
        elif name == "random":
            textures[name] = random_texture(stage_seed(cfg["seed"], "evaluation"), n)
        elif name == "dta":
            p = _require(dirs["attack"] / "texture.png", "attack texture")
            textures[name] = load_texture(p)
            upstream["attack"] = p
        else:
            raise ConfigError(f"unknown evaluation texture {name!r}")
    try:
        grid = PoseGrid(tuple(ev["distances"]), tuple(ev["pitches"]), float(ev["yaw_step"]))
        grid.cells()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid pose grid: {e}") from e
    scenes = [sample_scene(s) for s in scene_plan(cfg)["evaluation"]]
    report = pose_grid_eval(textures, grid, scenes, det, N=cfg["oracle"]["N"])
    out = dirs["evaluation"]
    emit_report(report, out)
    write_provenance(out, "evaluation", cfg, upstream)
    print(json.dumps({k: {"ap50": v["ap50"], "mean_conf": v["mean_conf"]} for k, v in report.aggregates().items()},
                     sort_keys=True))
    return out


def cmd_report(cfg: dict, eval_dir=None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dirs = _dirs(cfg)
    src = Path(eval_dir) if eval_dir else dirs["evaluation"]
    rows = read_report_csv(_require(src / "eval.csv", "evaluation CSV"))
    cells = [r for r in rows if r["distance_m"] != "all"]
    aggregates = {r["texture"]: {"ap50": r["ap50"], "mean_conf": r["mean_conf"], "n_images": r["n_images"]}
                  for r in rows if r["distance_m"] == "all"}
    textures = list(dict.fromkeys(r["texture"] for r in cells))
    distances = sorted({r["distance_m"] for r in cells})
    pitches = sorted({r["pitch_deg"] for r in cells})
    out = dirs["report"]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, label in (("ap50", "AP@0.5"), ("mean_conf", "mean confidence")):
        fig, axes = plt.subplots(len(distances), len(pitches), figsize=(3 * len(pitches), 2.4 * len(distances)),
                                 squeeze=False, sharex=True, sharey=True)
        for i, dist in enumerate(distances):
            for j, pitch in enumerate(pitches):
                ax = axes[i][j]
                for tex in textures:
                    pts = sorted((r["yaw_deg"], r[metric]) for r in cells
                                 if r["texture"] == tex and r["distance_m"] == dist and r["pitch_deg"] == pitch)
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=tex)
                ax.set_title(f"{dist:g} m, pitch {pitch:g}", fontsize=8)
                ax.set_ylim(-0.05, 1.05)
        axes[-1][0].set_xlabel("yaw (deg)")
        axes[0][0].set_ylabel(label)
        axes[0][0].legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{metric}_vs_yaw.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    imageio.write_json(out / "report_data.json", {"aggregates": aggregates, "textures": textures,
                                                  "distances": distances, "pitches": pitches})
    write_provenance(out, "report", cfg, {"evaluation": src / "eval.csv"})
    print("\n".join(str(p) for p in written))
    return out


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train-dtn": cmd_train_dtn,
    "train-detector": cmd_train_detector,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texcamo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help="output root directory (overrides the config)")
        p.add_argument("--stage-override", action="append", default=[], metavar="KEY=VALUE",
                       help="e.g. attack.epochs=0; value parsed as JSON when possible")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--eval-dir", help="evaluation directory (default <out>/evaluation)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config, args.stage_override, args.seed, args.out)
        if args.command == "report":
            cmd_report(cfg, args.eval_dir)
        else:
            COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(str(e), file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLossError, NonFiniteAttackLoss) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, DtnError, DetectorError, AttackError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
