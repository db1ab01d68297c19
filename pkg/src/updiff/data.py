"""Change-pair dataset ingestion (A/B/label directory layout), the
synthetic desk-scale triplet generator, and geometric augmentation.

Images are (3, H, W) float32 tensors in [-1, 1]; change maps are
(1, H, W) float32 tensors with values in {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

Tensor = torch.Tensor

LABEL_TOLERANCE = 8  # 8-bit label pixels must be within this of 0 or 255

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Triplet:
    """One sample: pre-change image, planned change map, post-change image."""

    pre: Tensor
    mask: Tensor
    post: Tensor
    id: str

    def __post_init__(self) -> None:
        if self.pre.shape[-2:] != self.mask.shape[-2:] or self.pre.shape[-2:] != self.post.shape[-2:]:
            raise ValueError(f"triplet {self.id}: components disagree on spatial dims")
        if self.pre.shape[0] != 3 or self.post.shape[0] != 3 or self.mask.shape[0] != 1:
            raise ValueError(f"triplet {self.id}: expected (3,H,W)/(1,H,W)/(3,H,W) channels")
        vals = torch.unique(self.mask)
        if not bool(((vals == 0) | (vals == 1)).all()):
            raise ValueError(f"triplet {self.id}: change map is not binary")


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str
    resolution: int
    count: int


def _to_unit_range(arr: np.ndarray) -> Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def _load_image(path: Path) -> Tensor:
    with Image.open(path) as img:
        return _to_unit_range(np.asarray(img.convert("RGB")))


def _load_label(path: Path) -> Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L")).astype(np.int16)
    off_low = arr > LABEL_TOLERANCE
    off_high = arr < 255 - LABEL_TOLERANCE
    if bool(np.any(off_low & off_high)):
        bad = int(arr[off_low & off_high].flat[0])
        raise ValueError(f"{path}: non-binary label value {bad} beyond tolerance +-{LABEL_TOLERANCE}")
    mask = (arr >= 128).astype(np.float32)
    return torch.from_numpy(mask).unsqueeze(0)


class TripletFolder(Sequence[Triplet]):
    """Lazy loader over the `root/<split>/{A,B,label}/` layout.

    A holds pre-change images, B post-change, label the binary masks; the
    three subdirectories must contain matching filenames.
    """

    def __init__(self, root: str | Path, split: str):
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        self.root = Path(root)
        self.split = split
        base = self.root / split
        a_dir, b_dir, label_dir = base / "A", base / "B", base / "label"
        if not a_dir.is_dir():
            raise FileNotFoundError(f"missing directory {a_dir}")
        self._names = sorted(p.name for p in a_dir.glob("*.png"))
        if not self._names:
            raise FileNotFoundError(f"no PNG files under {a_dir}")
        resolution: int | None = None
        for name in self._names:
            for d in (b_dir, label_dir):
                if not (d / name).is_file():
                    raise FileNotFoundError(f"missing counterpart file {d / name}")
            with Image.open(a_dir / name) as img:
                w, h = img.size
            if w != h:
                raise ValueError(f"{a_dir / name}: non-square image {w}x{h}")
            if resolution is None:
                resolution = w
            elif resolution != w:
                raise ValueError(
                    f"{a_dir / name}: resolution {w} differs from split resolution {resolution}"
                )
        self.resolution = int(resolution)

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            root=str(self.root), split=self.split, resolution=self.resolution, count=len(self)
        )

    def __len__(self) -> int:
        return len(self._names)

    def __getitem__(self, index: int) -> Triplet:
        name = self._names[index]
        base = self.root / self.split
        pre = _load_image(base / "A" / name)
        post = _load_image(base / "B" / name)
        if pre.shape != post.shape:
            raise ValueError(f"{name}: pre/post resolution mismatch")
        mask = _load_label(base / "label" / name)
        if mask.shape[-2:] != pre.shape[-2:]:
            raise ValueError(f"{name}: label resolution mismatch")
        return Triplet(pre=pre, mask=mask, post=post, id=Path(name).stem)

    def __iter__(self) -> Iterator[Triplet]:
        for i in range(len(self)):
            yield self[i]


def load_cd_dataset(root: str | Path, split: str) -> TripletFolder:
    """Open one split of an A/B/label change-pair dataset (lazily loaded)."""
    return TripletFolder(root, split)


# ---------------------------------------------------------------------------
# Synthetic desk-scale triplets
# ---------------------------------------------------------------------------

# The default change detector blurs the per-pixel channel-mean difference
# with sigma=1 and thresholds at 0.25, so structure/ground contrast must stay
# in a band (roughly 0.36..0.81) where the recovered outline tracks the true
# rectangle to within half a pixel.
_GROUND_MEAN_LOW, _GROUND_MEAN_HIGH = -0.50, -0.35
_GROUND_CHANNEL_SPREAD = 0.15
_BUILDING_MEAN_LOW, _BUILDING_MEAN_HIGH = 0.10, 0.20
_BUILDING_CHANNEL_SPREAD = 0.06
_GRID_DEPTH = 0.10


def _low_frequency_field(rng: np.random.Generator, res: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    field = np.zeros((res, res))
    for _ in range(2):
        period = rng.uniform(res / 4, res)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.06)
        field += amp * np.cos(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) / period + phase)
    return field


def _zero_mean_tint(rng: np.random.Generator, spread: float) -> np.ndarray:
    tint = rng.uniform(-spread, spread, size=3)
    return tint - tint.mean()


def _random_rect(rng: np.random.Generator, res: int, min_side: int = 8) -> tuple[int, int, int, int]:
    max_side = max(min_side, res // 2)
    h = int(rng.integers(min_side, max_side + 1))
    w = int(rng.integers(min_side, max_side + 1))
    y = int(rng.integers(0, res - h + 1))
    x = int(rng.integers(0, res - w + 1))
    return y, x, h, w


def _render_building(rng: np.random.Generator, img: np.ndarray, rect: tuple[int, int, int, int]) -> None:
    y, x, h, w = rect
    base = rng.uniform(_BUILDING_MEAN_LOW, _BUILDING_MEAN_HIGH)
    tint = _zero_mean_tint(rng, _BUILDING_CHANNEL_SPREAD)
    period = int(rng.integers(3, 7))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid_line = ((yy % period) == 0) | ((xx % period) == 0)
    cell = np.where(grid_line, base - _GRID_DEPTH, base + _GRID_DEPTH / 4)
    img[y : y + h, x : x + w, :] = cell[:, :, None] + tint[None, None, :]


def generate_synthetic(n: int, resolution: int = 64, seed: int = 0) -> list[Triplet]:
    """Procedural urban triplets: a textured ground plane, a change map of
    1-4 axis-aligned rectangles (sides >= 8 px), and a post-change image
    with grid-textured structures rendered inside the map and pixels outside
    it untouched."""
    if resolution < 16 or resolution % 2:
        raise ValueError(f"resolution must be an even integer >= 16, got {resolution}")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    triplets = []
    for i in range(n):
        ground_mean = rng.uniform(_GROUND_MEAN_LOW, _GROUND_MEAN_HIGH)
        base = ground_mean + _zero_mean_tint(rng, _GROUND_CHANNEL_SPREAD)
        field = _low_frequency_field(rng, resolution)
        mix = rng.uniform(0.6, 1.0, size=3)
        pre = base[None, None, :] + field[:, :, None] * mix[None, None, :]

        mask = np.zeros((resolution, resolution), dtype=bool)
        rects = [_random_rect(rng, resolution) for _ in range(int(rng.integers(1, 5)))]
        for y, x, h, w in rects:
            mask[y : y + h, x : x + w] = True

        # Pre-existing structures keep the scene urban; they avoid the change
        # area so everything under the map reads as new construction.
        for _ in range(int(rng.integers(0, 3))):
            ry, rx, rh, rw = _random_rect(rng, resolution)
            if not mask[ry : ry + rh, rx : rx + rw].any():
                _render_building(rng, pre, (ry, rx, rh, rw))

        post = pre.copy()
        for rect in rects:
            _render_building(rng, post, rect)
        post = np.where(mask[:, :, None], post, pre)

        pre_t = torch.from_numpy(np.clip(pre, -1, 1).astype(np.float32)).permute(2, 0, 1).contiguous()
        post_t = torch.from_numpy(np.clip(post, -1, 1).astype(np.float32)).permute(2, 0, 1).contiguous()
        mask_t = torch.from_numpy(mask.astype(np.float32)).unsqueeze(0)
        triplets.append(Triplet(pre=pre_t, mask=mask_t, post=post_t, id=f"synth-{seed}-{i:04d}"))
    return triplets


def write_dataset(triplets: Sequence[Triplet], root: str | Path, split: str) -> DatasetManifest:
    """Write triplets as 8-bit PNGs in the A/B/label layout."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    base = Path(root) / split
    for sub in ("A", "B", "label"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    resolution = None
    for t in triplets:
        resolution = t.pre.shape[-1]
        for sub, tensor in (("A", t.pre), ("B", t.post)):
            arr = ((tensor.permute(1, 2, 0).numpy() + 1.0) * 127.5).round().clip(0, 255).astype(np.uint8)
            Image.fromarray(arr).save(base / sub / f"{t.id}.png")
        label = (t.mask[0].numpy() * 255).astype(np.uint8)
        Image.fromarray(label, mode="L").save(base / "label" / f"{t.id}.png")
    return DatasetManifest(root=str(root), split=split, resolution=int(resolution), count=len(triplets))


def augment(t: Triplet, rng: np.random.Generator, crop: int | None = None) -> Triplet:
    """One geometric transform (flips plus optional crop) applied
    identically to all three components."""
    pre, mask, post = t.pre, t.mask, t.post
    res = pre.shape[-1]
    if crop is not None:
        if crop > res or crop > pre.shape[-2]:
            raise ValueError(f"crop {crop} larger than source {tuple(pre.shape[-2:])}")
        y = int(rng.integers(0, pre.shape[-2] - crop + 1))
        x = int(rng.integers(0, res - crop + 1))
        pre = pre[..., y : y + crop, x : x + crop]
        mask = mask[..., y : y + crop, x : x + crop]
        post = post[..., y : y + crop, x : x + crop]
    if rng.random() < 0.5:
        pre, mask, post = (torch.flip(v, dims=(-1,)) for v in (pre, mask, post))
    if rng.random() < 0.5:
        pre, mask, post = (torch.flip(v, dims=(-2,)) for v in (pre, mask, post))
    return Triplet(pre=pre.contiguous(), mask=mask.contiguous(), post=post.contiguous(), id=t.id)


def stack_triplets(triplets: Sequence[Triplet]) -> tuple[Tensor, Tensor, Tensor]:
    """(pre, mask, post) batch tensors from a list of same-size triplets."""
    pre = torch.stack([t.pre for t in triplets])
    mask = torch.stack([t.mask for t in triplets])
    post = torch.stack([t.post for t in triplets])
    return pre, mask, post
