"""Training and attack datasets exported from the scene oracle.

DTN samples pair a masked reference render (fixed reference colour) with a
masked flat colour and the masked render of that colour.  Attack samples keep
the full render, its mask and the pose the texture projection is calibrated
from.

On disk a dataset is ``manifest.json`` + ``scenes/<id>.json`` +
``images/{ref,exp,ren,orig,seg}_<id>.png``; the manifest carries a SHA-256 for
every file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .boxes import Box
from .scene import (DEFAULT_RESOLUTION, CameraPose, SceneTransformation, SegmentationMask,
                    object_box, render, segment)

REFERENCE_COLOR = (0.5, 0.5, 0.5)
MANIFEST_VERSION = 1

_DTN_FILES = ("ref", "exp", "ren", "seg")
_ATTACK_FILES = ("orig", "ref", "seg")


class DatasetError(ValueError):
    pass


@dataclass
class DtnSample:
    x_ref: np.ndarray
    eta_exp: np.ndarray
    x_ren: np.ndarray
    mask: np.ndarray
    scene_ref: SceneTransformation
    color: tuple[float, float, float]


@dataclass
class AttackSample:
    x_orig: np.ndarray
    x_ref: np.ndarray
    x_seg: SegmentationMask
    pose: CameraPose
    gt_box: Box
    scene: SceneTransformation


def random_colors(count: int, seed: int, low: float = 0.05, high: float = 0.95) -> list[tuple[float, float, float]]:
    rng = np.random.default_rng([31337, seed])
    return [tuple(float(c) for c in rng.uniform(low, high, size=3)) for _ in range(count)]


def _flat(color) -> np.ndarray:
    c = np.asarray(color, dtype=np.float64)
    if c.shape != (3,):
        raise DatasetError(f"colour must be an RGB triple, got {color!r}")
    return c.reshape(1, 1, 3)


def build_dtn_dataset(scenes, colors, reference_color=None, N: int = DEFAULT_RESOLUTION) -> list[DtnSample]:
    """One sample per (scene, colour) pair; the reference defaults to ``colors[0]``."""
    scenes, colors = list(scenes), [tuple(float(v) for v in c) for c in colors]
    if not scenes or not colors:
        raise DatasetError("need at least one scene and one colour")
    ref_color = colors[0] if reference_color is None else tuple(float(v) for v in reference_color)
    samples = []
    for scene in scenes:
        m = segment(scene, N).mask[..., None]
        x_ref = render(scene, _flat(ref_color), N) * m
        for color in colors:
            samples.append(DtnSample(
                x_ref=x_ref,
                eta_exp=np.broadcast_to(np.asarray(color), m.shape[:2] + (3,)) * m,
                x_ren=render(scene, _flat(color), N) * m,
                mask=m[..., 0],
                scene_ref=scene,
                color=color,
            ))
    return samples


def build_dtn_split(train_scenes, test_scenes, train_colors, test_colors,
                    reference_color=REFERENCE_COLOR, N: int = DEFAULT_RESOLUTION):
    """Train/test DTN datasets over disjoint scenes and disjoint colours."""
    shared_scenes = {s.scene_id for s in train_scenes} & {s.scene_id for s in test_scenes}
    if shared_scenes:
        raise DatasetError(f"train and test share scenes {sorted(shared_scenes)}")
    key = lambda c: tuple(round(float(v), 12) for v in c)
    shared_colors = {key(c) for c in train_colors} & {key(c) for c in test_colors}
    if shared_colors:
        raise DatasetError(f"train and test share colours {sorted(shared_colors)}")
    train = build_dtn_dataset(train_scenes, train_colors, reference_color, N)
    test = build_dtn_dataset(test_scenes, test_colors, reference_color, N)
    return train, test


def build_attack_dataset(scenes, reference_color=REFERENCE_COLOR, N: int = DEFAULT_RESOLUTION) -> list[AttackSample]:
    scenes = list(scenes)
    if not scenes:
        raise DatasetError("attack dataset needs at least one scene")
    samples = []
    for scene in scenes:
        seg = segment(scene, N)
        x_orig = render(scene, _flat(reference_color), N)
        samples.append(AttackSample(
            x_orig=x_orig,
            x_ref=x_orig * seg.mask[..., None],
            x_seg=seg,
            pose=scene.camera,
            gt_box=object_box(seg),
            scene=scene,
        ))
    return samples


def stack(samples: list[DtnSample], field: str) -> np.ndarray:
    return np.stack([getattr(s, field) for s in samples])


def save_dataset(samples, directory) -> Path:
    """Write samples as PNGs plus a checksummed manifest; returns the manifest path."""
    if not samples:
        raise DatasetError("nothing to save")
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "scenes").mkdir(exist_ok=True)
    kind = "dtn" if isinstance(samples[0], DtnSample) else "attack"
    entries = []
    for i, s in enumerate(samples):
        sid = f"{i:05d}"
        scene = s.scene_ref if kind == "dtn" else s.scene
        imageio.write_json(d / "scenes" / f"{sid}.json", scene.to_dict())
        if kind == "dtn":
            images = {"ref": s.x_ref, "exp": s.eta_exp, "ren": s.x_ren}
            mask = s.mask
        else:
            images = {"orig": s.x_orig, "ref": s.x_ref}
            mask = s.x_seg.mask
        files = {}
        for name, img in images.items():
            path = d / "images" / f"{name}_{sid}.png"
            imageio.save_rgb(path, img)
            files[name] = imageio.file_sha256(path)
        seg_path = d / "images" / f"seg_{sid}.png"
        imageio.save_mask(seg_path, mask)
        files["seg"] = imageio.file_sha256(seg_path)
        entry = {"id": sid, "scene": scene.to_dict(), "files": files}
        if kind == "dtn":
            entry["color"] = list(s.color)
        else:
            entry["gt_box"] = s.gt_box.as_list()
        entries.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": kind,
        "resolution": int(np.asarray(samples[0].x_ref).shape[0]),
        "files_per_sample": len(_DTN_FILES if kind == "dtn" else _ATTACK_FILES),
        "count": len(entries),
        "samples": entries,
    }
    imageio.write_json(d / "manifest.json", manifest)
    return d / "manifest.json"


def _checked(path: Path, digest: str) -> Path:
    if not path.exists():
        raise DatasetError(f"missing dataset file {path.name}")
    if imageio.file_sha256(path) != digest:
        raise DatasetError(f"checksum mismatch for {path.name}")
    return path


def load_dataset(directory):
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest in {d}")
    manifest = imageio.read_json(mpath)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')}")
    kind = manifest["kind"]
    samples = []
    for e in manifest["samples"]:
        sid, files = e["id"], e["files"]
        img = lambda name: imageio.load_rgb(_checked(d / "images" / f"{name}_{sid}.png", files[name]))
        mask = imageio.load_mask(_checked(d / "images" / f"seg_{sid}.png", files["seg"]))
        scene = SceneTransformation.from_dict(e["scene"])
        if kind == "dtn":
            samples.append(DtnSample(img("ref"), img("exp"), img("ren"), mask, scene, tuple(e["color"])))
        else:
            # the paintable sub-mask is oracle-internal and not persisted
            seg = SegmentationMask(mask=mask, paintable=mask.copy())
            samples.append(AttackSample(img("orig"), img("ref"), seg, scene.camera,
                                        Box(*e["gt_box"]), scene))
    if len(samples) != manifest["count"]:
        raise DatasetError("manifest count does not match its sample list")
    return samples
