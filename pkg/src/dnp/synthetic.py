"""Synthetic detection dataset: filled ellipses (targets) among rectangles and
triangles (distractors) on smooth textured noise, with exact boxes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .evaluation import GroundTruth
from .imageio import read_image, write_image

ANNOTATIONS = "annotations.jsonl"
TARGET = "ellipse"


@dataclass
class SyntheticSpec:
    width: int = 320
    height: int = 320
    min_targets: int = 1
    max_targets: int = 3
    max_distractors: int = 5
    min_size: int = 36  # bounding-box side range in pixels
    max_size: int = 96
    max_aspect: float = 2.0
    margin: int = 6  # minimum gap between shapes
    texture_sigma: float = 6.0
    noise: float = 12.0
    background_saturation: float = 0.0  # 1 keeps the full random background colors
    min_contrast: float = 100.0  # least RGB distance between a shape and the mean background

    def __post_init__(self) -> None:
        if not 1 <= self.min_size <= self.max_size <= min(self.width, self.height):
            raise ValueError("shape sizes must satisfy 1 <= min_size <= max_size <= image side")
        if not 0 <= self.min_targets <= self.max_targets:
            raise ValueError("target counts must satisfy 0 <= min_targets <= max_targets")
        if self.max_aspect < 1 or not 0 <= self.background_saturation <= 1:
            raise ValueError("max_aspect must be >= 1 and background_saturation in [0, 1]")


@dataclass
class ManifestEntry:
    image_id: str
    split: str
    annotation: GroundTruth
    image_file: str | None = None
    shapes: list[dict] = field(default_factory=list)  # every rendered shape, distractors included
    image: np.ndarray | None = field(default=None, repr=False)

    def load_image(self, root: Path | None) -> np.ndarray:
        if self.image is not None:
            return self.image
        if root is None or self.image_file is None:
            raise FileNotFoundError(f"{self.image_id}: no image data")
        return read_image(Path(root) / self.image_file)


@dataclass
class DatasetManifest:
    root: Path | None
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def image(self, entry: ManifestEntry) -> np.ndarray:
        return entry.load_image(self.root)

    def ground_truth(self, split: str | None = None) -> list[GroundTruth]:
        return [e.annotation for e in self.entries if split is None or e.split == split]

    def validate(self) -> None:
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in manifest")
        for e in self.entries:
            if e.image is None and not (self.root and e.image_file and (self.root / e.image_file).exists()):
                raise FileNotFoundError(f"{e.image_id}: missing image file")


def _ellipse_mask(h, w, cx, cy, ax, ay):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _rect_mask(h, w, l, t, r, b):
    mask = np.zeros((h, w), dtype=bool)
    mask[t:b, l:r] = True
    return mask


def _triangle_mask(h, w, pts):
    yy, xx = np.mgrid[0:h, 0:w]
    (x0, y0), (x1, y1), (x2, y2) = pts

    def side(ax, ay, bx, by):
        return (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)

    s0, s1, s2 = side(x0, y0, x1, y1), side(x1, y1, x2, y2), side(x2, y2, x0, y0)
    return ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight half-open box ``(l, t, r, b)`` around the set pixels."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _background(rng, spec):
    base = rng.normal(size=(spec.height, spec.width, 3))
    smooth = np.stack([gaussian_filter(base[:, :, c], spec.texture_sigma) for c in range(3)], axis=2)
    smooth /= smooth.std() + 1e-12
    tint = rng.uniform(60, 190, size=3)
    sat = spec.background_saturation
    # blend each color toward its gray level
    smooth = sat * smooth + (1 - sat) * smooth.mean(axis=2, keepdims=True)
    tint = sat * tint + (1 - sat) * tint.mean()
    noise = rng.normal(scale=spec.noise, size=smooth.shape)
    noise = sat * noise + (1 - sat) * noise.mean(axis=2, keepdims=True)
    return tint + 30.0 * smooth + noise


def _shape(rng, spec, kind):
    """Random shape parameters inside a sampled bounding box."""
    for _ in range(100):
        bw = int(rng.integers(spec.min_size, spec.max_size + 1))
        bh = int(rng.integers(spec.min_size, spec.max_size + 1))
        if max(bw, bh) <= spec.max_aspect * min(bw, bh):
            break
    l = int(rng.integers(0, spec.width - bw + 1))
    t = int(rng.integers(0, spec.height - bh + 1))
    if kind == TARGET:
        params = {"cx": l + (bw - 1) / 2, "cy": t + (bh - 1) / 2, "ax": bw / 2, "ay": bh / 2}
    elif kind == "rectangle":
        params = {"l": l, "t": t, "r": l + bw, "b": t + bh}
    else:
        pts = [
            (l + float(rng.uniform(0, bw - 1)), float(t)),
            (float(l), float(t + bh - 1)),
            (float(l + bw - 1), float(t + bh - 1)),
        ]
        params = {"pts": pts}
    return (l, t, l + bw, t + bh), params


def _render_mask(spec, kind, params):
    h, w = spec.height, spec.width
    if kind == TARGET:
        return _ellipse_mask(h, w, params["cx"], params["cy"], params["ax"], params["ay"])
    if kind == "rectangle":
        return _rect_mask(h, w, params["l"], params["t"], params["r"], params["b"])
    return _triangle_mask(h, w, params["pts"])


def render(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, list[dict]]:
    """One image and its list of shapes (kind, box, color)."""
    img = _background(rng, spec)
    backdrop = img.reshape(-1, 3).mean(axis=0)
    n_targets = int(rng.integers(spec.min_targets, spec.max_targets + 1))
    n_distract = int(rng.integers(0, spec.max_distractors + 1))
    kinds = [TARGET] * n_targets + [
        str(rng.choice(["rectangle", "triangle"])) for _ in range(n_distract)
    ]
    placed: list[tuple[int, int, int, int]] = []
    shapes = []
    for kind in kinds:
        for _ in range(200):
            box, params = _shape(rng, spec, kind)
            m = spec.margin
            if all(
                box[2] + m <= p[0] or p[2] + m <= box[0] or box[3] + m <= p[1] or p[3] + m <= box[1]
                for p in placed
            ):
                break
        else:
            if kind == TARGET and len([s for s in shapes if s["kind"] == TARGET]) < spec.min_targets:
                raise RuntimeError("could not place the required targets; enlarge the image")
            continue
        mask = _render_mask(spec, kind, params)
        if not mask.any():
            continue
        color = rng.uniform(0, 255, size=3)
        for _ in range(100):
            if np.linalg.norm(color - backdrop) >= spec.min_contrast:
                break
            color = rng.uniform(0, 255, size=3)
        img[mask] = color + rng.normal(scale=spec.noise / 2, size=(int(mask.sum()), 3))
        placed.append(box)
        shapes.append({"kind": kind, "box": list(mask_box(mask)), "params": params})
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), shapes


def generate_synthetic(
    seed: int,
    n_images: int,
    spec: SyntheticSpec | None = None,
    root: str | Path | None = None,
    n_test: int = 0,
) -> DatasetManifest:
    """Deterministic dataset; the last ``n_test`` images form the test split.

    With ``root`` set, images are written as PPM files next to a JSON-lines
    annotation file; otherwise images stay in memory.
    """
    if n_images < 1:
        raise ValueError("n_images must be positive")
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    root_path = Path(root) if root is not None else None
    if root_path is not None:
        (root_path / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(n_images):
        image, shapes = render(rng, spec)
        targets = [s for s in shapes if s["kind"] == TARGET]
        gt = GroundTruth(
            f"{seed}_{k:05d}",
            spec.width,
            spec.height,
            [tuple(s["box"]) for s in targets],
            [TARGET] * len(targets),
        )
        split = "test" if k >= n_images - n_test else "train"
        entry = ManifestEntry(gt.image_id, split, gt, shapes=shapes)
        if root_path is not None:
            entry.image_file = f"images/{gt.image_id}.ppm"
            write_image(root_path / entry.image_file, image)
        else:
            entry.image = image
        entries.append(entry)
    manifest = DatasetManifest(root_path, entries)
    if root_path is not None:
        save_manifest(manifest)
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path | None = None) -> Path:
    path = Path(path) if path is not None else Path(manifest.root) / ANNOTATIONS
    with open(path, "w") as fh:
        for e in manifest.entries:
            rec = e.annotation.to_json()
            rec["split"] = e.split
            if e.image_file:
                rec["file"] = e.image_file
            fh.write(json.dumps(rec) + "\n")
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines annotation file (or a directory holding one)."""
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATIONS
    entries = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        gt = GroundTruth.from_json(rec)
        entries.append(ManifestEntry(gt.image_id, rec.get("split", "train"), gt, rec.get("file")))
    manifest = DatasetManifest(path.parent, entries)
    manifest.validate()
    return manifest
