"""Synthetic image/prompt/mask triplets for exercising the fine-tuning
mechanism.

Every scene contains one duplicated shape kind (the target plus one or
two distractors of the same kind in different colors) and at most one
extra shape of another kind, on a noisy background.  The prompt names
the target by color, so only a model that reads the prompt can beat the
ceiling of an image-only predictor; ``prompt_blind_ceiling`` measures
that ceiling with a cheating segmenter that knows the candidate shapes
but not the prompt.

Images are quantized to 8-bit levels at generation time, so the PNG
round trip through save/load is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .metrics import dsc

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.12, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
}
KINDS = ("circle", "square", "triangle")
KIND_SYNONYM = {"circle": "round", "square": "boxy", "triangle": "triangular"}

PROMPT_TEMPLATES = (
    "the {color} {kind}",
    "segment the {kind} that is {color}",
    "{color} {synonym} region",
    "find the {color} {kind}",
)

VALID_SIZES = (32, 64, 128)
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SceneShape:
    kind: str
    color: str
    mask: np.ndarray


@dataclass
class Triplet:
    image: np.ndarray          # [H, W, 3], floats in [0, 1] on the 1/255 grid
    prompts: list
    mask: np.ndarray           # [H, W], uint8 in {0, 1}


@dataclass
class DatasetSplits:
    train: list
    val: list
    test: list
    seed: int | None = None
    scene_shapes: dict | None = None   # split -> per-sample candidate shapes

    def split(self, name):
        if name not in SPLIT_NAMES:
            raise ConfigError(f"split: expected one of {SPLIT_NAMES}, got {name!r}")
        return getattr(self, name)


def _raster(kind, cx, cy, r, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # upward triangle: width grows linearly from apex (cy - r) to base (cy + r)
    rel = (yy - (cy - r)) / 2.0
    return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= rel)


def _place_shapes(rng, kinds, size):
    """Random non-overlapping placements; returns list of (kind, cx, cy, r)."""
    lo = max(4, int(round(0.14 * size)))
    hi = max(lo + 1, int(round(0.23 * size)))
    for _ in range(60):
        placed = []
        ok = True
        for kind in kinds:
            for _ in range(120):
                r = int(rng.integers(lo, hi + 1))
                cx = int(rng.integers(r + 1, size - r - 1))
                cy = int(rng.integers(r + 1, size - r - 1))
                if all((cx - px) ** 2 + (cy - py) ** 2 >= (r + pr + 3) ** 2
                       for _, px, py, pr in placed):
                    placed.append((kind, cx, cy, r))
                    break
            else:
                ok = False
                break
        if ok:
            return placed
    raise ConfigError(f"image_size: could not place {len(kinds)} disjoint shapes at {size}x{size}")


def _make_sample(rng, size):
    target_kind = str(rng.choice(KINDS))
    n_same = int(rng.integers(2, 4))           # target + 1 or 2 same-kind distractors
    n_extra = int(rng.integers(0, 2))
    other_kinds = [k for k in KINDS if k != target_kind]
    kinds = [target_kind] * n_same + [str(rng.choice(other_kinds))] * n_extra
    placed = _place_shapes(rng, kinds, size)
    color_names = list(rng.permutation(list(COLORS)))[: len(placed)]

    image = rng.uniform(0.0, 0.30, (size, size, 3))
    shapes = []
    for (kind, cx, cy, r), color in zip(placed, color_names):
        mask = _raster(kind, cx, cy, r, size)
        jitter = rng.uniform(-0.08, 0.08, (int(mask.sum()), 3))
        image[mask] = np.clip(np.asarray(COLORS[color]) + jitter, 0.0, 1.0)
        shapes.append(SceneShape(kind=kind, color=color, mask=mask.astype(np.uint8)))
    image = np.round(image * 255.0) / 255.0

    target = shapes[0]
    prompts = [
        tpl.format(color=target.color, kind=target.kind, synonym=KIND_SYNONYM[target.kind])
        for tpl in PROMPT_TEMPLATES
    ]
    return Triplet(image=image, prompts=prompts, mask=target.mask.copy()), shapes


def generate(seed, n, height, width, train_frac=0.70, val_frac=0.15):
    """Deterministic dataset of n samples, split train/val/test."""
    if n < 3:
        raise ConfigError(f"n: need at least 3 samples for a split, got {n}")
    if height != width or height not in VALID_SIZES:
        raise ConfigError(f"size: expected square size in {VALID_SIZES}, got {height}x{width}")
    children = np.random.SeedSequence(seed).spawn(n)
    triplets, scenes = [], []
    for child in children:
        t, s = _make_sample(np.random.default_rng(child), height)
        triplets.append(t)
        scenes.append(s)
    n_train = int(train_frac * n)
    n_val = int(val_frac * n)
    bounds = (0, n_train, n_train + n_val, n)
    parts = [triplets[a:b] for a, b in zip(bounds, bounds[1:])]
    scene_parts = [scenes[a:b] for a, b in zip(bounds, bounds[1:])]
    return DatasetSplits(
        train=parts[0], val=parts[1], test=parts[2], seed=seed,
        scene_shapes=dict(zip(SPLIT_NAMES, scene_parts)),
    )


def prompt_blind_ceiling(triplets, scenes):
    """Mean DSC of the best image-only segmenter on these samples.

    The cheating predictor sees each scene's candidate shapes (those of
    the duplicated kind, which by construction always include the
    target) and outputs the union of candidates that maximizes expected
    DSC under a uniform target; it never sees the prompt.  Its realized
    score is the ceiling a prompt-ignoring model can reach.
    """
    scores = []
    for triplet, shapes in zip(triplets, scenes):
        counts = {}
        for s in shapes:
            counts[s.kind] = counts.get(s.kind, 0) + 1
        candidates = [s for s in shapes if counts[s.kind] >= 2]
        best_pred, best_expected = None, -1.0
        for choice in range(1, 2 ** len(candidates)):
            pred = np.zeros_like(candidates[0].mask)
            for j, cand in enumerate(candidates):
                if choice >> j & 1:
                    pred = pred | cand.mask
            expected = float(np.mean([dsc(pred, c.mask) for c in candidates]))
            if expected > best_expected:
                best_expected, best_pred = expected, pred
        scores.append(dsc(best_pred, triplet.mask))
    return float(np.mean(scores))


# -- manifest I/O --------------------------------------------------------------


def save_dataset(splits, out_dir):
    """Write PNG pairs plus a JSONL manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    index = 0
    for split in SPLIT_NAMES:
        for t in splits.split(split):
            image_rel = f"images/{index:05d}.png"
            mask_rel = f"masks/{index:05d}.png"
            Image.fromarray(np.round(t.image * 255.0).astype(np.uint8), mode="RGB").save(
                out / image_rel)
            Image.fromarray((t.mask * 255).astype(np.uint8), mode="L").save(out / mask_rel)
            records.append({"image": image_rel, "mask": mask_rel,
                            "prompts": list(t.prompts), "split": split})
            index += 1
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_dataset(manifest_path):
    """Read a manifest back into DatasetSplits (scene metadata is not stored)."""
    manifest = Path(manifest_path)
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    root = manifest.parent
    parts = {name: [] for name in SPLIT_NAMES}
    with open(manifest) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {ln}: malformed JSON ({exc})") from None
            for key in ("image", "mask", "prompts", "split"):
                if key not in rec:
                    raise DataError(f"line {ln}: missing field {key!r}")
            if rec["split"] not in SPLIT_NAMES:
                raise DataError(f"line {ln}: unknown split {rec['split']!r}")
            if not rec["prompts"] or not all(isinstance(p, str) for p in rec["prompts"]):
                raise DataError(f"line {ln}: prompts must be a non-empty list of strings")
            image_path = root / rec["image"]
            mask_path = root / rec["mask"]
            for p in (image_path, mask_path):
                if not p.exists():
                    raise DataError(f"line {ln}: file not found: {p}")
            image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float64) / 255.0
            mask_raw = np.asarray(Image.open(mask_path).convert("L"))
            if not np.isin(mask_raw, (0, 255)).all():
                raise DataError(f"line {ln}: mask {mask_path} has values outside {{0, 255}}")
            parts[rec["split"]].append(Triplet(
                image=image, prompts=list(rec["prompts"]),
                mask=(mask_raw == 255).astype(np.uint8),
            ))
    return DatasetSplits(train=parts["train"], val=parts["val"], test=parts["test"])


def datasets_equal(a, b):
    """Content equality over triplets in all three splits."""
    for name in SPLIT_NAMES:
        xs, ys = a.split(name), b.split(name)
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            if (not np.array_equal(x.image, y.image) or x.prompts != y.prompts
                    or not np.array_equal(x.mask, y.mask)):
                return False
    return True
