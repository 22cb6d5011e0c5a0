"""Manifest I/O, synthetic cross-view scenes, splits and tensor loading.

A manifest is a JSON-lines file, one sample per line::

    {"query": "query/0000.png", "reference": "reference/0000.png", "view": "drone",
     "click": [row, col], "bbox": [cx, cy, w, h]}

Relative paths resolve against the manifest's directory.  Clicks are query-image
pixels; boxes are reference-image pixels, center format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .boxes import BBox
from .vspe import ClickPoint, DroneEncodingConfig, GroundEncodingConfig, attach_encoding, encode

VIEWS = ("ground", "drone")
SPLITS = ("train", "validation", "test")

# (height, width) of the real benchmark images
CVOGL_DIMS = {"satellite": (1024, 1024), "ground": (256, 512), "drone": (256, 256)}

# desk-scale defaults for synthetic scenes, (height, width)
SYNTH_DIMS = {"reference": (128, 128), "ground": (64, 128), "drone": (64, 64)}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    query_path: Path
    reference_path: Path
    click: ClickPoint
    gt_box: BBox
    view: str

    def to_record(self, root: Path | None = None) -> dict:
        def rel(p: Path) -> str:
            if root is not None:
                try:
                    return p.relative_to(root).as_posix()
                except ValueError:
                    pass
            return str(p)

        return {
            "query": rel(self.query_path),
            "reference": rel(self.reference_path),
            "view": self.view,
            "click": [self.click.row, self.click.col],
            "bbox": self.gt_box.as_list(),
        }


@dataclass
class DatasetManifest:
    samples: list[Sample]
    split: str = "train"
    # observed (height, width) per role: "query" and "reference"
    dims: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def matches_cvogl(self) -> bool:
        view = self.samples[0].view if self.samples else "ground"
        return (self.dims.get("reference") == CVOGL_DIMS["satellite"]
                and self.dims.get("query") == CVOGL_DIMS[view])

    def mean_box_size(self) -> tuple[float, float]:
        return (float(np.mean([s.gt_box.w for s in self.samples])),
                float(np.mean([s.gt_box.h for s in self.samples])))


def _image_hw(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.height, im.width


def _parse_record(rec: dict, root: Path, lineno: int) -> Sample:
    try:
        view = rec["view"]
        row, col = rec["click"]
        cx, cy, w, h = (float(v) for v in rec["bbox"])
        query, reference = rec["query"], rec["reference"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: malformed record ({exc!r})") from None
    if view not in VIEWS:
        raise ManifestError(f"line {lineno}: unknown view {view!r}")
    if int(row) != row or int(col) != col:
        raise ManifestError(f"line {lineno}: click must be integer pixels, got {rec['click']}")
    return Sample(root / query, root / reference, ClickPoint(int(row), int(col)), BBox(cx, cy, w, h), view)


def validate_sample(s: Sample, query_hw, ref_hw, where: str = ""):
    qh, qw = query_hw
    if not (0 <= s.click.row < qh and 0 <= s.click.col < qw):
        raise ManifestError(f"{where}click {s.click.row},{s.click.col} outside {qh}x{qw} query image")
    rh, rw = ref_hw
    if not s.gt_box.is_valid_in(rh, rw):
        raise ManifestError(f"{where}box {s.gt_box.as_list()} invalid for {rh}x{rw} reference image")
    if not (0 <= s.gt_box.cx < rw and 0 <= s.gt_box.cy < rh):
        raise ManifestError(f"{where}box center outside {rh}x{rw} reference image")


def load_manifest(path: str | Path, split: str = "train") -> DatasetManifest:
    path = Path(path)
    root = path.parent
    samples, seen, dims = [], set(), {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"line {lineno}: record must be an object")
            s = _parse_record(rec, root, lineno)
            for p in (s.query_path, s.reference_path):
                if not p.is_file():
                    raise ManifestError(f"line {lineno}: missing image {p}")
            key = (s.query_path, s.reference_path)
            if key in seen:
                raise ManifestError(f"line {lineno}: duplicate pair {key}")
            seen.add(key)
            qhw, rhw = _image_hw(s.query_path), _image_hw(s.reference_path)
            validate_sample(s, qhw, rhw, f"line {lineno}: ")
            dims.setdefault("query", qhw)
            dims.setdefault("reference", rhw)
            samples.append(s)
    return DatasetManifest(samples, split, dims)


def write_manifest(path: str | Path, samples: Iterable[Sample]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(path.parent.resolve()), sort_keys=True) + "\n")


def split_manifest(m: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle once and cut into train/validation/test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be 3 non-negative numbers summing to 1: {fractions}")
    n = len(m.samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = round(fractions[0] * n)
    n_val = min(round(fractions[1] * n), n - n_train)
    cuts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    return tuple(
        DatasetManifest([m.samples[i] for i in sorted(idx)], name, dict(m.dims))
        for idx, name in zip(cuts, SPLITS)
    )


def from_corner_records(rows: Iterable[dict], root: str | Path = ".") -> list[Sample]:
    """Adapt detection-style annotations to samples.

    Each row carries ``query``, ``reference``, ``view``, a click as ``click_xy``
    (x, y) and a box as ``bbox_xyxy`` (x0, y0, x1, y1).
    """
    root = Path(root)
    out = []
    for r in rows:
        x, y = r["click_xy"]
        out.append(Sample(root / r["query"], root / r["reference"],
                          ClickPoint(int(round(y)), int(round(x))),
                          BBox.from_corners(*map(float, r["bbox_xyxy"])), r["view"]))
    return out


# synthetic scenes

def _perspective_coeffs(dst_pts, src_pts) -> list[float]:
    """PIL PERSPECTIVE coefficients mapping output points ``dst_pts`` onto input points ``src_pts``."""
    a = []
    b = []
    for (x, y), (u, v) in zip(dst_pts, src_pts):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    return np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)).tolist()


def _background(rng: np.random.Generator, h: int, w: int) -> Image.Image:
    coarse = rng.integers(60, 180, size=(6, 6, 3), dtype=np.uint8)
    smooth = np.asarray(Image.fromarray(coarse).resize((w, h), Image.BILINEAR), dtype=np.int16)
    grain = rng.integers(-12, 13, size=(h, w, 3), dtype=np.int16)
    return Image.fromarray(np.clip(smooth + grain, 0, 255).astype(np.uint8))


def _polygon(rng: np.random.Generator, cx, cy, rx, ry):
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    # points on an ellipse in angular order form a convex polygon
    return [(float(cx + rx * np.cos(t)), float(cy + ry * np.sin(t))) for t in angles]


def _query_quad(rng, view: str, center, ref_hw, q_hw):
    """Reference-image points seen at the query corners TL, TR, BR, BL."""
    qh, qw = q_hw
    side = min(ref_hw)
    phi = rng.uniform(0, 2 * np.pi)
    ev = np.array([np.cos(phi), np.sin(phi)])
    eu = np.array([-ev[1], ev[0]])
    c = np.asarray(center, dtype=np.float64)
    if view == "drone":
        extent = side * rng.uniform(0.3, 0.45)  # mild zoom
        half = extent / 2
        c = c + rng.uniform(-0.15, 0.15, size=2) * extent
        local = [(-half, -half), (half, -half), (half, half), (-half, half)]
    else:
        # oblique look: far edge (query top) wide, near edge (query bottom) narrow
        depth = side * rng.uniform(0.35, 0.5)
        near, far = side * rng.uniform(0.25, 0.35), side * rng.uniform(0.6, 0.8)
        c = c + eu * rng.uniform(-0.1, 0.1) * near
        local = [(-far / 2, depth / 2), (far / 2, depth / 2), (near / 2, -depth / 2), (-near / 2, -depth / 2)]
    return [tuple(c + u * eu + v * ev) for u, v in local]


def render_scene(rng: np.random.Generator, view: str, ref_hw, q_hw):
    """Render one scene; returns reference, query, and the target masks in both views."""
    rh, rw = ref_hw
    qh, qw = q_hw
    side = min(rh, rw)
    for _ in range(100):
        ref = _background(rng, rh, rw)
        draw = ImageDraw.Draw(ref)
        n_shapes = int(rng.integers(2, 6))
        shapes = []
        for _k in range(n_shapes):
            rx, ry = rng.uniform(0.05, 0.12, size=2) * side
            cx = rng.uniform(rx + 2, rw - rx - 2)
            cy = rng.uniform(ry + 2, rh - ry - 2)
            color = tuple(int(v) for v in rng.integers(0, 256, size=3))
            shapes.append((_polygon(rng, cx, cy, rx, ry), color, (cx, cy)))
        # shape 0 is the target, drawn last so nothing occludes it
        for pts, color, _c in shapes[1:] + shapes[:1]:
            draw.polygon(pts, fill=color)
        ref_mask = Image.new("L", (rw, rh), 0)
        ImageDraw.Draw(ref_mask).polygon(shapes[0][0], fill=255)

        quad = _query_quad(rng, view, shapes[0][2], (rh, rw), (qh, qw))
        coeffs = _perspective_coeffs([(0, 0), (qw, 0), (qw, qh), (0, qh)], quad)
        query = ref.transform((qw, qh), Image.PERSPECTIVE, coeffs, Image.BILINEAR, fillcolor=(135, 190, 235))
        q_mask = ref_mask.transform((qw, qh), Image.PERSPECTIVE, coeffs, Image.NEAREST, fillcolor=0)
        qm = np.asarray(q_mask) > 0
        if qm.sum() >= 4 and np.asarray(ref_mask).any():
            return ref, query, ref_mask, q_mask
    raise RuntimeError("could not place a visible target after 100 attempts")


def mask_box(mask: np.ndarray) -> BBox:
    """Tight half-open box around the nonzero pixels."""
    rows, cols = np.nonzero(mask)
    return BBox.from_corners(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def mask_click(mask: np.ndarray) -> ClickPoint:
    """Centroid of the mask, snapped to the nearest mask pixel."""
    rows, cols = np.nonzero(mask)
    r, c = rows.mean(), cols.mean()
    k = int(np.argmin((rows - r) ** 2 + (cols - c) ** 2))
    return ClickPoint(int(rows[k]), int(cols[k]))


def synth_generate(n: int, seed: int, view: str, out_dir: str | Path,
                   ref_hw=None, query_hw=None, write_masks: bool = True) -> DatasetManifest:
    """Write ``n`` synthetic samples plus ``manifest.jsonl`` under ``out_dir``."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    ref_hw = tuple(ref_hw or SYNTH_DIMS["reference"])
    query_hw = tuple(query_hw or SYNTH_DIMS[view])
    out = Path(out_dir)
    for sub in ("query", "reference") + (("masks",) if write_masks else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        ref, query, ref_mask, q_mask = render_scene(rng, view, ref_hw, query_hw)
        name = f"{i:05d}.png"
        ref.save(out / "reference" / name)
        query.save(out / "query" / name)
        if write_masks:
            ref_mask.save(out / "masks" / f"{i:05d}_reference.png")
            q_mask.save(out / "masks" / f"{i:05d}_query.png")
        samples.append(Sample(
            (out / "query" / name).resolve(),
            (out / "reference" / name).resolve(),
            mask_click(np.asarray(q_mask)),
            mask_box(np.asarray(ref_mask)),
            view,
        ))
    write_manifest(out / "manifest.jsonl", samples)
    return DatasetManifest(samples, "train", {"query": query_hw, "reference": ref_hw})


# tensors

def resize_sample(query: Image.Image, ref: Image.Image, s: Sample, query_hw=None, ref_hw=None):
    """Bilinear resize of both images, with click and box rescaled by the same factors."""
    click, box = s.click, s.gt_box
    if query_hw is not None and (query.height, query.width) != tuple(query_hw):
        qh, qw = query_hw
        click = click.scaled(qh / query.height, qw / query.width, qh, qw)
        query = query.resize((qw, qh), Image.BILINEAR)
    if ref_hw is not None and (ref.height, ref.width) != tuple(ref_hw):
        rh, rw = ref_hw
        box = box.scaled(rw / ref.width, rh / ref.height)
        ref = ref.resize((rw, rh), Image.BILINEAR)
    return query, ref, replace(s, click=click, gt_box=box)


def _to_tensor(im: Image.Image) -> torch.Tensor:
    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_tensors(samples: Sequence[Sample], ground: GroundEncodingConfig | None = None,
                 drone: DroneEncodingConfig | None = None, query_hw=None, ref_hw=None):
    """Stack samples into ``(query B x 4 x H x W, reference B x 3 x Hr x Wr, boxes)``."""
    queries, refs, boxes = [], [], []
    for s in samples:
        with Image.open(s.query_path) as q, Image.open(s.reference_path) as r:
            q, r, s = resize_sample(q.convert("RGB"), r.convert("RGB"), s, query_hw, ref_hw)
            qt = _to_tensor(q)
            enc = encode(s.view, qt.shape[1], qt.shape[2], s.click, ground, drone)
            queries.append(attach_encoding(qt, enc))
            refs.append(_to_tensor(r))
            boxes.append(s.gt_box)
    return torch.stack(queries), torch.stack(refs), boxes
