"""Self-supervised pretext transforms: 90-degree rotations and jigsaw tiles.

Rotation index ``k`` means ``90 * k`` degrees counter-clockwise, i.e. for
index 1 ``out[i][j] = in[j][W - 1 - i]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import ROTATION_CLASSES, InputError

ANGLES = (0, 90, 180, 270)


def _rot(x, k: int, axes: tuple[int, int]):
    if isinstance(x, torch.Tensor):
        return torch.rot90(x, k, dims=axes)
    return np.rot90(x, k, axes=axes).copy()


def rotate_image(image, index: int, axes: tuple[int, int] = (0, 1)):
    """Rotate one image (default H x W [x C] layout) by ``index`` quarter turns.

    Works on numpy arrays and torch tensors, returning a new buffer.
    """
    if index not in (0, 1, 2, 3):
        raise InputError(f"rotation index must be in 0..3, got {index}")
    if image.shape[axes[0]] != image.shape[axes[1]]:
        raise InputError(f"rotation needs square images, got spatial shape "
                         f"{image.shape[axes[0]]}x{image.shape[axes[1]]}")
    return _rot(image, index, axes)


def inverse_rotation(index: int) -> int:
    return (ROTATION_CLASSES - index) % ROTATION_CLASSES


def make_rotation_batch(batch: torch.Tensor, rng: np.random.Generator):
    """Rotate each image of an N x C x H x W batch by an i.i.d. uniform quarter turn.

    Returns ``(rotated, labels)`` with labels as an int64 tensor.
    """
    if batch.shape[0] == 0:
        raise InputError("rotation batch is empty")
    if batch.shape[-1] != batch.shape[-2]:
        raise InputError(f"rotation needs square images, got {tuple(batch.shape[-2:])}")
    labels = rng.integers(0, ROTATION_CLASSES, size=batch.shape[0])
    out = torch.empty_like(batch)
    for k in range(ROTATION_CLASSES):
        sel = np.flatnonzero(labels == k)
        if len(sel):
            idx = torch.from_numpy(sel)
            out[idx] = torch.rot90(batch[idx], k, dims=(2, 3))
    return out, torch.from_numpy(labels.astype(np.int64))


@dataclass(frozen=True)
class JigsawPermutationSet:
    grid: int
    perms: np.ndarray  # P x grid**2, row 0 is the identity

    @property
    def size(self) -> int:
        return len(self.perms)

    def min_hamming(self) -> int:
        """Smallest pairwise Hamming distance, by exhaustive comparison."""
        if self.size < 2:
            return 0
        d = (self.perms[:, None, :] != self.perms[None, :, :]).sum(-1)
        return int(d[~np.eye(self.size, dtype=bool)].min())

    def save(self, path) -> None:
        lines = [" ".join(str(int(v)) for v in p) for p in self.perms]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "JigsawPermutationSet":
        rows = [list(map(int, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
        perms = np.array(rows, dtype=np.int64)
        n = perms.shape[1]
        grid = math.isqrt(n)
        if grid * grid != n:
            raise InputError(f"permutation length {n} is not a square number")
        if (perms[0] != np.arange(n)).any():
            raise InputError("first permutation must be the identity")
        if any(sorted(p) != list(range(n)) for p in perms.tolist()):
            raise InputError("file contains a row that is not a permutation")
        if len({tuple(p) for p in perms.tolist()}) != len(perms):
            raise InputError("permutations are not distinct")
        return cls(grid, perms)


def build_jigsaw_permutations(P: int, grid: int, rng: np.random.Generator,
                              candidates: int = 1000) -> JigsawPermutationSet:
    """Greedy max-min Hamming permutation set, starting from the identity.

    Each step scores ``candidates`` fresh random permutations (or every
    permutation, when there are no more than that) by their minimum Hamming
    distance to the chosen set and keeps the best one.
    """
    n = grid * grid
    total = math.factorial(n)
    if not 1 <= P <= total:
        raise InputError(f"P must lie in [1, {total}] for a {grid}x{grid} grid, got {P}")
    chosen = [np.arange(n)]
    exhaustive = total <= candidates
    if exhaustive:
        import itertools
        pool = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        min_d = (pool != chosen[0]).sum(1)
    while len(chosen) < P:
        if exhaustive:
            best = int(np.argmax(min_d))
            pick = pool[best]
            min_d = np.minimum(min_d, (pool != pick).sum(1))
        else:
            cand = rng.permuted(np.tile(np.arange(n), (candidates, 1)), axis=1)
            sel = np.stack(chosen)
            d = (cand[:, None, :] != sel[None, :, :]).sum(-1).min(1)
            best = int(np.argmax(d))
            if d[best] == 0:
                continue  # every candidate already chosen; draw again
            pick = cand[best]
        chosen.append(pick.copy())
    return JigsawPermutationSet(grid, np.stack(chosen).astype(np.int64))


def shuffle_tiles(batch: torch.Tensor, perms: np.ndarray, grid: int) -> torch.Tensor:
    """Reassemble each image so that tile slot ``i`` holds input tile ``perm[i]``."""
    n, c, h, w = batch.shape
    th, tw = h // grid, w // grid
    tiles = batch.reshape(n, c, grid, th, grid, tw).permute(0, 2, 4, 1, 3, 5).reshape(n, grid * grid, c, th, tw)
    idx = torch.from_numpy(np.asarray(perms, dtype=np.int64))
    picked = torch.gather(tiles, 1, idx[:, :, None, None, None].expand(-1, -1, c, th, tw))
    return picked.reshape(n, grid, grid, c, th, tw).permute(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)


def make_jigsaw_batch(batch: torch.Tensor, perms: JigsawPermutationSet, rng: np.random.Generator):
    """Tile-shuffle each image with a uniformly drawn permutation; label = its index."""
    if batch.shape[0] == 0:
        raise InputError("jigsaw batch is empty")
    h, w = batch.shape[-2:]
    if h % perms.grid or w % perms.grid:
        raise InputError(f"image size {h}x{w} is not divisible by grid {perms.grid}")
    labels = rng.integers(0, perms.size, size=batch.shape[0])
    return shuffle_tiles(batch, perms.perms[labels], perms.grid), torch.from_numpy(labels.astype(np.int64))
