"""Synthetic rule-labelled driving scenes, on-disk dataset format, batching.

Two scene families are generated on a patch-aligned grid:

``basic``       an optional traffic light in the top band and up to two
                obstacles (car or person) in the left or right image half.
``relativity``  as ``basic`` plus a gray vertical ego column at a random x;
                left/right is decided relative to that column, not the
                image centre.

Directory layout written by :func:`write_dataset`::

    manifest.json
    <split>/labels.jsonl
    <split>/images/<id>.ppm      binary P6, maxval 255
    <split>/regions/<id>.rgf     region boxes and features
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import (
    LIGHT_GREEN,
    LIGHT_RED,
    MOVE_FORWARD,
    N_ACTIONS,
    N_EXPLANATIONS,
    OBSTACLE_CAR,
    OBSTACLE_PERSON,
    OBSTACLES_LEFT,
    OBSTACLES_RIGHT,
    ROAD_CLEAR,
    STOP_SLOW,
    TURN_LEFT,
    TURN_RIGHT,
    LabelPair,
)
from .network import Extractor, extract_features, patch_centers

FAMILIES = ("basic", "relativity")
SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1
RGF_MAGIC = b"RGF1"
RGF_HEADER = struct.Struct("<4sIII")

COLORS = {
    "light_green": (0.10, 0.85, 0.15),
    "light_red": (0.90, 0.10, 0.10),
    "car": (0.15, 0.30, 0.90),
    "person": (0.95, 0.80, 0.15),
    "ego": (0.60, 0.60, 0.60),
}
BACKGROUND = (0.22, 0.22, 0.25)
NOISE = 0.04
OBSTACLE_TAGS = ("car", "person")


class DatasetError(Exception):
    """Invalid or incompatible dataset contents."""


class FormatError(DatasetError):
    """A file does not follow the expected binary or text format."""


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneObject:
    tag: str
    box: tuple[int, int, int, int]  # x0, y0, x1, y1; end-exclusive pixels

    @property
    def center_x(self) -> float:
        return (self.box[0] + self.box[2]) / 2.0


@dataclass
class Scene:
    image: np.ndarray
    objects: list[SceneObject]
    labels: LabelPair
    ego_column: float | None = None


def obstacle_side(obj: SceneObject, width: int, ego_x: float | None) -> str:
    pivot = width / 2.0 if ego_x is None else ego_x
    return "left" if obj.center_x < pivot else "right"


def label_scene(objects: Sequence[SceneObject], width: int) -> LabelPair:
    """Apply the rule table to an object list."""
    tags = [o.tag for o in objects]
    ego = [o for o in objects if o.tag == "ego"]
    ego_x = ego[0].center_x if ego else None
    obstacles = [o for o in objects if o.tag in OBSTACLE_TAGS]
    sides = {obstacle_side(o, width, ego_x) for o in obstacles}
    red = "light_red" in tags
    green = "light_green" in tags
    person = "person" in tags

    actions = set()
    if not red and not person:
        actions.add(MOVE_FORWARD)
    if red or person:
        actions.add(STOP_SLOW)
    if "left" not in sides:
        actions.add(TURN_LEFT)
    if "right" not in sides:
        actions.add(TURN_RIGHT)

    reasons = set()
    if green:
        reasons.add(LIGHT_GREEN)
        if not obstacles:
            reasons.add(ROAD_CLEAR)
    if red:
        reasons.add(LIGHT_RED)
    if "car" in tags:
        reasons.add(OBSTACLE_CAR)
    if person:
        reasons.add(OBSTACLE_PERSON)
    if "left" in sides:
        reasons.add(OBSTACLES_LEFT)
    if "right" in sides:
        reasons.add(OBSTACLES_RIGHT)
    return LabelPair.from_sets(actions, reasons)


def render_scene(
    objects: Sequence[SceneObject],
    size: int = 32,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Draw objects over the road background; pixels quantized to k/255."""
    image = np.empty((size, size, 3))
    image[:] = BACKGROUND
    # the ego column is drawn first so obstacles stay on top
    for obj in sorted(objects, key=lambda o: o.tag != "ego"):
        x0, y0, x1, y1 = obj.box
        image[y0:y1, x0:x1] = COLORS[obj.tag]
    if rng is not None:
        image += rng.uniform(-NOISE, NOISE, size=image.shape)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _overlaps(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def generate_scene(
    rng: np.random.Generator,
    family: str = "basic",
    size: int = 32,
    patch: int = 4,
) -> Scene:
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    grid = size // patch
    if grid < 4:
        raise ValueError(f"image size {size} with patch {patch} leaves too small a grid")
    objects: list[SceneObject] = []

    ego_col = None
    if family == "relativity":
        ego_col = int(rng.integers(0, grid))
        objects.append(SceneObject("ego", (ego_col * patch, 2 * patch, (ego_col + 1) * patch, size)))

    if rng.random() < 2.0 / 3.0:
        tag = "light_green" if rng.random() < 0.5 else "light_red"
        c = int(rng.integers(0, grid))
        objects.append(SceneObject(tag, (c * patch, 0, (c + 1) * patch, 2 * patch)))

    n_obstacles = int(rng.integers(0, 3))
    half = grid // 2
    for _ in range(n_obstacles):
        tag = OBSTACLE_TAGS[int(rng.integers(0, 2))]
        if ego_col is None:
            cols = [c for c in range(grid - 1) if c + 1 < half or c >= half]
        else:
            cols = [c for c in range(grid - 1) if ego_col not in (c, c + 1)]
        for _attempt in range(8):
            c = cols[int(rng.integers(0, len(cols)))]
            r = int(rng.integers(2, grid - 1))
            box = (c * patch, r * patch, (c + 2) * patch, (r + 2) * patch)
            if not any(_overlaps(box, o.box) for o in objects if o.tag != "ego"):
                objects.append(SceneObject(tag, box))
                break

    image = render_scene(objects, size, rng)
    ego_x = objects[0].center_x if ego_col is not None else None
    return Scene(image, objects, label_scene(objects, size), ego_x)


# ---------------------------------------------------------------------------
# regional features


@dataclass
class RegionFeatures:
    boxes: np.ndarray  # n x 4 int
    features: np.ndarray  # n x f

    def __len__(self) -> int:
        return len(self.boxes)


def region_features_for(scene: Scene, extractor: Extractor) -> RegionFeatures:
    """Mean-pooled patch features per object box, plus a whole-image region."""
    h, w, _ = scene.image.shape
    feats = extract_features(scene.image, extractor)
    centers = patch_centers(h, w, extractor.patch)
    boxes = [o.box for o in scene.objects] + [(0, 0, w, h)]
    rows = []
    for x0, y0, x1, y1 in boxes:
        inside = (
            (centers[:, 0] >= x0) & (centers[:, 0] < x1)
            & (centers[:, 1] >= y0) & (centers[:, 1] < y1)
        )
        if not inside.any():
            cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
            inside = np.zeros(len(centers), dtype=bool)
            inside[np.argmin((centers[:, 0] - cx) ** 2 + (centers[:, 1] - cy) ** 2)] = True
        rows.append(feats[inside].mean(axis=0))
    return RegionFeatures(np.array(boxes, dtype=np.int64), np.array(rows))


# ---------------------------------------------------------------------------
# manifest and splits


@dataclass
class DatasetManifest:
    seed: int = 0
    family: str = "basic"
    splits: dict[str, int] = field(default_factory=lambda: {"train": 2000, "val": 500, "test": 500})
    image_size: int = 32
    patch: int = 4
    feat: int = 32
    extractor_seed: int = 0
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise DatasetError(f"family must be one of {FAMILIES}, got {self.family!r}")
        for name, n in self.splits.items():
            if name not in SPLITS:
                raise DatasetError(f"unknown split {name!r}")
            if int(n) <= 0:
                raise DatasetError(f"split {name!r} must have a positive size, got {n}")
        if self.image_size % self.patch:
            raise DatasetError(
                f"image size {self.image_size} is not divisible by patch {self.patch}"
            )
        if self.format_version != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format version {self.format_version}")

    @property
    def seq_len(self) -> int:
        return (self.image_size // self.patch) ** 2

    def extractor(self) -> Extractor:
        return Extractor.from_seed(self.extractor_seed, self.patch, self.feat)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> DatasetManifest:
        return cls(**json.loads(text))


@dataclass
class Split:
    """A split held in memory in model-ready form."""

    ids: list[str]
    images: np.ndarray  # N x H x W x 3
    features: np.ndarray  # N x s x f
    regions: list[RegionFeatures]
    actions: np.ndarray  # N x 4
    explanations: np.ndarray  # N x 21

    def __len__(self) -> int:
        return len(self.ids)

    def inputs(self, arch: str, index: Iterable[int]) -> list[np.ndarray]:
        if arch in ("gsa", "gna"):
            return [self.features[i] for i in index]
        return [self.regions[i].features for i in index]

    def subset(self, index: Sequence[int]) -> Split:
        index = list(index)
        return Split(
            [self.ids[i] for i in index],
            self.images[index],
            self.features[index],
            [self.regions[i] for i in index],
            self.actions[index],
            self.explanations[index],
        )


def scene_rng(seed: int, split: str, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), i])


def generate_split(manifest: DatasetManifest, split: str) -> list[Scene]:
    return [
        generate_scene(scene_rng(manifest.seed, split, i), manifest.family,
                       manifest.image_size, manifest.patch)
        for i in range(manifest.splits[split])
    ]


def build_split(scenes: Sequence[Scene], extractor: Extractor, prefix: str = "s") -> Split:
    """Model-ready split, numerically identical to writing then reading it."""
    regions = []
    for scene in scenes:
        r = region_features_for(scene, extractor)
        regions.append(RegionFeatures(r.boxes, r.features.astype("<f4").astype(np.float64)))
    images = np.stack([s.image for s in scenes])
    return Split(
        [f"{prefix}-{i:05d}" for i in range(len(scenes))],
        images,
        np.stack([extract_features(img, extractor) for img in images]),
        regions,
        np.array([s.labels.actions for s in scenes], dtype=np.int64),
        np.array([s.labels.explanations for s in scenes], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# file formats


def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    body = data[pos + 1:]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0


def write_regions(path: Path, regions: RegionFeatures) -> None:
    n, f = regions.features.shape
    with open(path, "wb") as fh:
        fh.write(RGF_HEADER.pack(RGF_MAGIC, n, f, 0))
        for box, feat in zip(regions.boxes, regions.features):
            fh.write(np.asarray(box, dtype="<i4").tobytes())
            fh.write(np.asarray(feat, dtype="<f4").tobytes())


def read_regions(path: Path) -> RegionFeatures:
    data = Path(path).read_bytes()
    if len(data) < RGF_HEADER.size:
        raise FormatError(f"{path}: truncated region file header")
    magic, n, f, _ = RGF_HEADER.unpack_from(data)
    if magic != RGF_MAGIC:
        raise FormatError(f"{path}: bad region file magic {magic!r}")
    record = 16 + 4 * f
    if len(data) != RGF_HEADER.size + n * record:
        raise FormatError(
            f"{path}: expected {RGF_HEADER.size + n * record} bytes for {n} regions, got {len(data)}"
        )
    raw = np.frombuffer(data, dtype=np.uint8, offset=RGF_HEADER.size).reshape(n, record)
    boxes = raw[:, :16].copy().view("<i4").astype(np.int64)
    feats = raw[:, 16:].copy().view("<f4").astype(np.float64)
    return RegionFeatures(boxes.reshape(n, 4), feats.reshape(n, f))


def write_dataset(root: Path, manifest: DatasetManifest, scenes: dict[str, Sequence[Scene]]) -> None:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        existing = manifest_path.read_text()
        if existing != manifest.to_json():
            raise DatasetError(f"{manifest_path} already exists with a different manifest")
    for split, n in manifest.splits.items():
        if len(scenes.get(split, ())) != n:
            raise DatasetError(f"split {split!r}: manifest declares {n} scenes, got {len(scenes.get(split, ()))}")
    extractor = manifest.extractor()
    root.mkdir(parents=True, exist_ok=True)
    for split in manifest.splits:
        d = root / split
        (d / "images").mkdir(parents=True, exist_ok=True)
        (d / "regions").mkdir(parents=True, exist_ok=True)
        lines = []
        for i, scene in enumerate(scenes[split]):
            sid = f"{split}-{i:05d}"
            write_ppm(d / "images" / f"{sid}.ppm", scene.image)
            write_regions(d / "regions" / f"{sid}.rgf", region_features_for(scene, extractor))
            lines.append(json.dumps({
                "id": sid,
                "image": f"images/{sid}.ppm",
                "actions": list(scene.labels.actions),
                "reasons": list(scene.labels.explanations),
            }))
        (d / "labels.jsonl").write_text("\n".join(lines) + "\n")
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(manifest.to_json())
    os.replace(tmp, manifest_path)


def read_manifest(root: Path) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        return DatasetManifest.from_json(path.read_text())
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _parse_label_line(path: Path, lineno: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(rec, dict) or not {"id", "image", "actions", "reasons"} <= set(rec):
        raise FormatError(f"{path}:{lineno}: record needs id, image, actions, reasons")
    if len(rec["actions"]) != N_ACTIONS or len(rec["reasons"]) != N_EXPLANATIONS:
        raise FormatError(
            f"{path}:{lineno}: expected {N_ACTIONS} actions and {N_EXPLANATIONS} reasons"
        )
    return rec


def read_split(root: Path, split: str, manifest: DatasetManifest | None = None) -> Split:
    root = Path(root)
    manifest = manifest or read_manifest(root)
    if split not in manifest.splits:
        raise DatasetError(f"split {split!r} is not in the manifest ({sorted(manifest.splits)})")
    d = root / split
    labels_path = d / "labels.jsonl"
    if not labels_path.exists():
        raise DatasetError(f"missing {labels_path}")
    records = []
    with open(labels_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(_parse_label_line(labels_path, lineno, line))
    if len(records) != manifest.splits[split]:
        raise DatasetError(
            f"{labels_path}: manifest declares {manifest.splits[split]} scenes, found {len(records)}"
        )
    extractor = manifest.extractor()
    images = np.stack([read_ppm(d / r["image"]) for r in records])
    size = manifest.image_size
    if images.shape[1:3] != (size, size):
        raise DatasetError(f"{d}: images are {images.shape[1:3]}, manifest says {size}x{size}")
    return Split(
        [r["id"] for r in records],
        images,
        np.stack([extract_features(img, extractor) for img in images]),
        [read_regions(d / "regions" / f"{r['id']}.rgf") for r in records],
        np.array([r["actions"] for r in records], dtype=np.int64),
        np.array([r["reasons"] for r in records], dtype=np.int64),
    )


def read_dataset(root: Path) -> tuple[DatasetManifest, dict[str, Split]]:
    manifest = read_manifest(root)
    return manifest, {s: read_split(root, s, manifest) for s in manifest.splits}


def synthesize(root: Path, manifest: DatasetManifest) -> None:
    write_dataset(root, manifest, {s: generate_split(manifest, s) for s in manifest.splits})


# ---------------------------------------------------------------------------
# batching


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches, deterministic in ``(seed, epoch)``; last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
