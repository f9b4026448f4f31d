"""Synthetic shapes corpus: scene sampling, rasterization, caption and dialogue text.

Scenes live on a 3x3 grid with 1-3 colored shapes over a colored background.
The caption carries count plus the first object's color and shape; the
dialogue carries everything else (background, sizes, positions, later
objects' appearance), so dialogue access is what closes the information gap.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

COLOR_NAMES = ("blue", "gray", "green", "red", "white", "yellow")
# maximally separated RGB values so downsampled shapes stay attributable
PALETTE = {
    "blue": (0, 0, 255),
    "gray": (128, 128, 128),
    "green": (0, 255, 0),
    "red": (255, 0, 0),
    "white": (255, 255, 255),
    "yellow": (255, 255, 0),
}
SHAPE_NAMES = ("circle", "square", "triangle")
SIZE_NAMES = ("small", "large")
RESOLUTIONS = (16, 32, 64, 128, 256)
GRID = 3
MAX_OBJECTS = 3
DIALOGUE_TURNS = 10
ORDINALS = ("first", "second", "third")

# fraction of the half-cell spanned by a shape; 0.8 keeps large-shape edges
# aligned well enough that pooled 2x renders agree with direct renders
SIZE_FACTORS = {"small": 0.5, "large": 0.8}

PAD_TURN = ("is there anything else", "no")


@dataclass(frozen=True)
class ObjectSpec:
    """One shape on the grid."""

    shape: str
    color: str
    size: str
    cell: tuple[int, int]  # (row, col), each in 0..2

    def __post_init__(self):
        if self.shape not in SHAPE_NAMES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLOR_NAMES:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size not in SIZE_NAMES:
            raise ValueError(f"unknown size {self.size!r}")
        row, col = self.cell
        if not (0 <= row < GRID and 0 <= col < GRID):
            raise ValueError(f"cell {self.cell!r} outside the {GRID}x{GRID} grid")


@dataclass(frozen=True)
class SceneSpec:
    """Full scene description. `seed` records provenance and is excluded
    from equality: two specs are equal when they describe the same scene."""

    background_color: str
    objects: tuple[ObjectSpec, ...]
    seed: int = dataclasses.field(compare=False, default=0)

    def __post_init__(self):
        if self.background_color not in COLOR_NAMES:
            raise ValueError(f"unknown background color {self.background_color!r}")
        if not (1 <= len(self.objects) <= MAX_OBJECTS):
            raise ValueError(f"scene must hold 1..{MAX_OBJECTS} objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError(f"objects share a grid cell: {cells}")


@dataclass(frozen=True)
class Dialogue:
    """Exactly ten question/answer turns."""

    turns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if len(self.turns) != DIALOGUE_TURNS:
            raise ValueError(f"dialogue must hold {DIALOGUE_TURNS} turns, got {len(self.turns)}")
        for q, a in self.turns:
            if not q or not a:
                raise ValueError("empty question or answer in dialogue")


def sample_scene(seed: int) -> SceneSpec:
    """Draw a scene from the corpus distribution, deterministically in `seed`.

    Counts are uniform over {1,2,3}, cells are drawn without replacement,
    object colors avoid the background color so every object is visible.
    """
    rng = np.random.default_rng(seed)
    background = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    flat_cells = rng.choice(GRID * GRID, size=count, replace=False)
    foreground = [c for c in COLOR_NAMES if c != background]
    objects = []
    for flat in sorted(int(c) for c in flat_cells):  # raster order: first object = top-left-most
        objects.append(
            ObjectSpec(
                shape=SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))],
                color=foreground[rng.integers(len(foreground))],
                size=SIZE_NAMES[rng.integers(len(SIZE_NAMES))],
                cell=divmod(flat, GRID),
            )
        )
    return SceneSpec(background_color=background, objects=tuple(objects), seed=int(seed))


def _color_value(name: str) -> np.ndarray:
    return np.asarray(PALETTE[name], dtype=np.float32) / 127.5 - 1.0


def _object_mask(obj: ObjectSpec, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    """Binary inside-shape test at pixel centers; no anti-aliasing."""
    row, col = obj.cell
    cx = (col + 0.5) / GRID
    cy = (row + 0.5) / GRID
    a = SIZE_FACTORS[obj.size] / (2 * GRID)  # shape half-extent in normalized units
    dx = xx - cx
    dy = yy - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= a * a
    if obj.shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= a
    # upward triangle: apex at cy - a, base corners at (cx +- a, cy + a)
    return (np.abs(dy) <= a) & (np.abs(dx) <= (dy + a) / 2)


def render_scene(spec: SceneSpec, resolution: int) -> np.ndarray:
    """Rasterize to (resolution, resolution, 3) float32 in [-1, 1]."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution {resolution} not in {RESOLUTIONS}")
    centers = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    xx, yy = np.meshgrid(centers, centers)  # yy varies along rows
    img = np.empty((resolution, resolution, 3), dtype=np.float32)
    img[:] = _color_value(spec.background_color)
    for obj in spec.objects:
        img[_object_mask(obj, xx, yy)] = _color_value(obj.color)
    return img


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Linear [-1, 1] -> [0, 255] rescale with rounding."""
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float32) / 127.5) - 1.0


def save_png(img: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def caption_of(spec: SceneSpec) -> str:
    first = spec.objects[0]
    return f"a scene with {len(spec.objects)} objects, including a {first.color} {first.shape}"


def dialogue_of(spec: SceneSpec) -> Dialogue:
    turns = [("what color is the background", f"the background is {spec.background_color}")]
    for i, obj in enumerate(spec.objects):
        name = ORDINALS[i]
        if i > 0:
            turns.append((f"what does the {name} object look like", f"a {obj.color} {obj.shape}"))
        turns.append((f"what size is the {name} object", f"it is {obj.size}"))
        row, col = obj.cell
        turns.append((f"where is the {name} object", f"in row {row} column {col}"))
    while len(turns) < DIALOGUE_TURNS:
        turns.append(PAD_TURN)
    return Dialogue(turns=tuple(turns))


def derive_seed(seed: int, index: int) -> int:
    """Stable per-sample seed from a global seed, independent of draw order."""
    h = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def spec_to_record(spec: SceneSpec) -> dict:
    return {
        "background_color": spec.background_color,
        "objects": [
            {"shape": o.shape, "color": o.color, "size": o.size, "cell": list(o.cell)}
            for o in spec.objects
        ],
        "seed": spec.seed,
    }


def spec_from_record(rec: dict) -> SceneSpec:
    return SceneSpec(
        background_color=rec["background_color"],
        objects=tuple(
            ObjectSpec(
                shape=o["shape"], color=o["color"], size=o["size"], cell=tuple(o["cell"])
            )
            for o in rec["objects"]
        ),
        seed=int(rec.get("seed", 0)),
    )


@dataclass(frozen=True)
class DatasetManifest:
    n: int
    seed: int
    resolutions: tuple[int, ...]
    digest: str


def generate_dataset(n: int, seed: int, resolutions, out_dir) -> DatasetManifest:
    """Write images/<res>/<id>.png, metadata.jsonl and manifest.json.

    The digest covers metadata lines and raw uint8 pixels, so reruns with the
    same (n, seed, resolutions) are checkably identical.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    resolutions = tuple(sorted(int(r) for r in resolutions))
    for res in resolutions:
        if res not in RESOLUTIONS:
            raise ValueError(f"resolution {res} not in {RESOLUTIONS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in resolutions:
        (out_dir / "images" / str(res)).mkdir(parents=True, exist_ok=True)

    digest = hashlib.sha256()
    with open(out_dir / "metadata.jsonl", "w") as meta_f:
        for idx in range(n):
            spec = sample_scene(derive_seed(seed, idx))
            record = {
                "id": idx,
                "caption": caption_of(spec),
                "dialogue": [{"q": q, "a": a} for q, a in dialogue_of(spec).turns],
                "spec": spec_to_record(spec),
            }
            line = json.dumps(record)
            meta_f.write(line + "\n")
            digest.update(line.encode())
            for res in resolutions:
                img = to_uint8(render_scene(spec, res))
                digest.update(img.tobytes())
                Image.fromarray(img).save(out_dir / "images" / str(res) / f"{idx}.png")

    manifest = DatasetManifest(n=n, seed=int(seed), resolutions=resolutions, digest=digest.hexdigest())
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(
            {"n": manifest.n, "seed": manifest.seed, "resolutions": list(resolutions), "digest": manifest.digest},
            f,
            indent=2,
        )
        f.write("\n")
    return manifest


def first_object_class(spec: SceneSpec) -> int:
    """Joint (shape, color) class of the caption's object, 18 classes."""
    first = spec.objects[0]
    return SHAPE_NAMES.index(first.shape) * len(COLOR_NAMES) + COLOR_NAMES.index(first.color)


FIRST_OBJECT_CLASSES = len(SHAPE_NAMES) * len(COLOR_NAMES)
