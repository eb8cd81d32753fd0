"""Dataset ingestion, split construction and on-disk dataset layout.

Split files hold one ``relative/path label`` line per image (single ASCII
space, LF endings, no header). Unlabeled lines carry ``-1``; a missing label
column is read as unlabeled too.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import UNLABELED, DataError, DatasetSplit, InputError, Pool

SPLIT_NAMES = ("labeled_source", "source_test", "labeled_target", "val_target",
               "unlabeled_target", "unlabeled_target_uncurated", "test_target")


def read_split_file(path) -> list[tuple[str, int]]:
    entries = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) == 1:
            entries.append((parts[0], UNLABELED))
        elif len(parts) == 2:
            try:
                entries.append((parts[0], int(parts[1])))
            except ValueError:
                raise DataError(f"{path}:{n}: bad label {parts[1]!r}") from None
        else:
            raise DataError(f"{path}:{n}: expected 'path label', got {line!r}")
    return entries


def write_split_file(path, entries: Sequence[tuple[str, int]]) -> None:
    lines = [f"{p} {UNLABELED if y is None or y < 0 else int(y)}\n" for p, y in entries]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.writelines(lines)


def pool_entries(pool: Pool, labels: bool = True) -> list[tuple[str, int]]:
    return [(i, int(y) if labels else UNLABELED) for i, y in zip(pool.ids, pool.labels)]


def load_image(path, size: int, channels: int = 3) -> np.ndarray:
    """Decode, center-crop to square, bilinear-resize to ``size``; float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            w, h = im.size
            s = min(w, h)
            if w != h:
                left, top = (w - s) // 2, (h - s) // 2
                im = im.crop((left, top, left + s, top + s))
            if s != size:
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr.reshape(size, size, channels)


def load_domain_folder(root, split_file, image_size: int = 32, channels: int = 3,
                       domain: Optional[str] = None) -> Pool:
    """Pool of the images listed in ``split_file`` (paths relative to ``root``), in file order."""
    root = Path(root)
    entries = read_split_file(split_file) if not isinstance(split_file, list) else split_file
    seen, dupes = set(), []
    for p, _ in entries:
        if p in seen:
            dupes.append(p)
        seen.add(p)
    if dupes:
        raise DataError(f"duplicate ids in {split_file}: {sorted(set(dupes))[:10]}")
    missing = [p for p, _ in entries if not (root / p).is_file()]
    if missing:
        raise DataError(f"{len(missing)} missing image(s) under {root}: " + ", ".join(missing))
    if domain is None:
        domain = Path(entries[0][0]).parts[0] if entries else "unknown"
    if not entries:
        return Pool.empty((image_size, image_size, channels), domain)
    images = np.stack([load_image(root / p, image_size, channels) for p, _ in entries])
    return Pool(images, [y for _, y in entries], [p for p, _ in entries], domain)


def build_kshot_split(pool: Pool, k: int, val_per_class: int, rng: np.random.Generator,
                      test_fraction: float = 0.2, test_policy: str = "holdout"):
    """Split a labeled target pool into (labeled, val, unlabeled, test).

    Per class, after a seeded shuffle: with ``test_policy="holdout"`` a
    ``test_fraction`` slice is carved off first as the test set; the next
    ``k`` examples are the labeled shots and the next ``val_per_class`` the
    validation set. The unlabeled pool is every non-val, non-test example with
    its label stripped (the shots included). ``test_policy="mme"`` carves no
    holdout and tests on the remainder, which then overlaps the unlabeled pool.
    """
    if k < 0 or val_per_class < 0:
        raise InputError("k and val_per_class must be >= 0")
    if test_policy not in ("holdout", "mme"):
        raise InputError(f"unknown test policy {test_policy!r}")
    if not pool.is_labeled:
        raise InputError("k-shot split needs a fully labeled pool")
    lab, val, unl, test = [], [], [], []
    for c in np.unique(pool.labels):
        idx = rng.permutation(np.flatnonzero(pool.labels == c))
        n_test = int(round(test_fraction * len(idx))) if test_policy == "holdout" else 0
        if len(idx) < n_test + k + val_per_class + 1:
            raise DataError(f"class {int(c)} has {len(idx)} examples; need at least "
                            f"{n_test + k + val_per_class + 1}")
        cut = np.cumsum([n_test, k, val_per_class])
        c_test, c_lab, c_val, rest = np.split(idx, cut)
        lab.append(c_lab)
        val.append(c_val)
        unl.append(np.concatenate([c_lab, rest]))
        test.append(c_test if test_policy == "holdout" else rest)
    take = lambda parts: np.sort(np.concatenate(parts))  # noqa: E731
    return (pool.subset(take(lab)), pool.subset(take(val)),
            pool.subset(take(unl), strip_labels=True), pool.subset(take(test)))


def build_uncurated_pool(curated: Pool, distractors: Pool, num_classes: Optional[int] = None) -> Pool:
    """Union of the curated unlabeled pool and distractor images, labels stripped."""
    if num_classes is not None:
        known = distractors.labels[distractors.labels != UNLABELED]
        if len(known) and (known < num_classes).any():
            raise DataError("distractor pool contains images of the evaluation classes")
    clash = set(curated.ids) & set(distractors.ids)
    if clash:
        raise DataError(f"id collision between curated and distractor pools: {sorted(clash)[:5]}")
    if len(distractors) == 0:
        return curated.stripped()
    return Pool.concat([curated.stripped(), distractors.stripped()], domain=curated.domain)


# ---------------------------------------------------------------- on-disk layout

def write_pool_images(root, pool: Pool) -> None:
    """Write each image as ``root/<id>`` (PNG, 8 bits per channel)."""
    root = Path(root)
    for img, rel in zip(pool.images, pool.ids):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = np.round(img * 255).astype(np.uint8)
        Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path, format="PNG")


def write_dataset(root, pools: dict[str, Pool], info: dict) -> None:
    """Persist pools as images + split files, plus ``dataset.json`` describing them."""
    root = Path(root)
    written: set[str] = set()
    for name, pool in pools.items():
        fresh = pool.subset([i for i, rel in enumerate(pool.ids) if rel not in written])
        write_pool_images(root, fresh)
        written.update(pool.ids)
        write_split_file(root / "splits" / f"{name}.txt", pool_entries(pool, labels=pool.is_labeled))
    info = dict(info, splits=sorted(pools))
    (root / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def read_dataset_info(root) -> dict:
    path = Path(root) / "dataset.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def load_split(root, name: str, info: Optional[dict] = None) -> Pool:
    info = info or read_dataset_info(root)
    path = Path(root) / "splits" / f"{name}.txt"
    if not path.is_file():
        raise DataError(f"split file {path} not found")
    domain = "source" if "source" in name else "target"
    return load_domain_folder(root, path, info["image_size"], info["channels"], domain=domain)


def load_dataset_split(root, data_mode: str = "standard") -> tuple[DatasetSplit, dict]:
    """Assemble a ``DatasetSplit`` from a directory written by ``write_dataset``."""
    info = read_dataset_info(root)
    unl_name = "unlabeled_target" if data_mode == "standard" else "unlabeled_target_uncurated"
    if data_mode not in ("standard", "uncurated"):
        raise InputError(f"data mode must be standard or uncurated, got {data_mode!r}")
    pools = {n: load_split(root, n, info) for n in
             ("labeled_source", "labeled_target", "val_target", "test_target")}
    split = DatasetSplit(pools["labeled_source"], pools["labeled_target"], load_split(root, unl_name, info),
                         pools["val_target"], pools["test_target"])
    return split, info
