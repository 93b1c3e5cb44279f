"""Synthetic bird dataset generator, dataset/manifest/checkpoint file formats.

Every image is a procedurally drawn "bird" (ellipse body, circle head,
triangle bill, optional wing pattern) at a random position and scale over a
cluttered background.  Each class is a unique attribute tuple (body color,
head color, bill length, wing pattern); ten templated descriptions per image
spell out the attributes without ever naming the class.  Generation is a
pure function of the spec: images get per-image derived seeds
(global seed XOR image index), so outputs are byte-identical across runs.

File formats (all dependency-free and bit-exact):
  images       binary PPM (P6), 64x64, 8-bit
  descriptions one text file per image, 10 lines
  manifest     CSV with header image_id,path,label,split,x0,y0,x1,y1
  checkpoint   magic "CVL1", u32 entry count, then per entry u32 name
               length, name bytes, u32 rank, u32 dims, float32 values
               (all little-endian)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CheckpointFormatError, DatasetSpecError, ManifestError
from .vision import IMAGE_SIZE, BoundingBox

# ---------------------------------------------------------------------------
# attribute space

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "brown": (0.36, 0.20, 0.06),
    "white": (0.95, 0.95, 0.92),
}
BILLS = ("long", "short")
PATTERNS = ("plain", "striped", "spotted")

BILL_COLOR = (0.12, 0.10, 0.08)

SPLIT_FRACTIONS = {"train": 0.6, "val": 0.2, "test": 0.2}


@dataclass(frozen=True)
class ClassAttributes:
    body_color: str
    head_color: str
    bill: str
    wing_pattern: str


@dataclass
class SynthSpec:
    num_classes: int
    images_per_class: int
    clutter_level: float = 0.5
    seed: int = 0


@dataclass
class SampleRecord:
    image_id: str
    image_path: Path
    label: int
    split: str
    descriptions: list[str]
    gt_box: BoundingBox


def class_attribute_table(spec: SynthSpec) -> list[ClassAttributes]:
    """Unique attribute tuple per class, preferring distinct color pairs."""
    combos = [
        ClassAttributes(b, h, bill, pat)
        for b in COLORS for h in COLORS for bill in BILLS for pat in PATTERNS
    ]
    if spec.num_classes > len(combos):
        raise DatasetSpecError(
            f"{spec.num_classes} classes exceed the {len(combos)} attribute tuples")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(combos))
    chosen: list[ClassAttributes] = []
    seen_pairs: set[tuple[str, str]] = set()
    rest: list[ClassAttributes] = []
    for i in order:
        c = combos[i]
        if (c.body_color, c.head_color) in seen_pairs:
            rest.append(c)
        else:
            seen_pairs.add((c.body_color, c.head_color))
            chosen.append(c)
        if len(chosen) == spec.num_classes:
            return chosen
    return chosen + rest[: spec.num_classes - len(chosen)]


# ---------------------------------------------------------------------------
# rendering


def _jitter(color: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    return np.clip(np.asarray(color) * rng.uniform(0.85, 1.05), 0.0, 1.0)


def render_sample(attrs: ClassAttributes, clutter_level: float,
                  rng: np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray, BoundingBox]:
    """Draw one bird; returns (pixels (3,H,W) in [0,1], foreground mask, box)."""
    size = IMAGE_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((3, size, size))
    base = rng.uniform(0.32, 0.46)  # dark enough that pale heads stay visible
    for c in range(3):
        img[c] = base + rng.uniform(-0.06, 0.06)

    # clutter: rectangles drawn from the same color palette as the birds, so
    # the full image is genuinely distracting and localization has value
    n_clutter = int(round(clutter_level * 12))
    palette = list(COLORS.values())
    for _ in range(n_clutter):
        w = int(rng.integers(4, 12))
        h = int(rng.integers(4, 12))
        x = int(rng.integers(0, size - w))
        y = int(rng.integers(0, size - h))
        col = _jitter(palette[rng.integers(len(palette))], rng)
        img[:, y : y + h, x : x + w] = col[:, None, None]

    # bird geometry; extents keep the whole bird inside the frame
    s = rng.uniform(8.5, 11.5)  # body semi-axis (horizontal); the bird stays
    # small relative to the frame so localization genuinely pays off
    ry = 0.62 * s
    head_r = 0.62 * s  # large enough that head color survives downsampling
    facing = 1 if rng.random() < 0.5 else -1
    bill_len = 1.6 * head_r if attrs.bill == "long" else 0.7 * head_r
    lead_x = 0.75 * s + 0.8 * head_r + bill_len  # head+bill side
    up_y = 0.75 * ry + 1.55 * head_r
    x_lo = (s if facing == 1 else lead_x) + 1.0
    x_hi = size - 1.0 - (lead_x if facing == 1 else s)
    cx = rng.uniform(x_lo, x_hi)
    cy = rng.uniform(up_y + 1.0, size - 1.0 - ry)

    body = ((xx - cx) / s) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    hx = cx + facing * 0.75 * s
    hy = cy - 0.75 * ry - 0.55 * head_r
    head = (xx - hx) ** 2 + (yy - hy) ** 2 <= head_r ** 2
    bx0 = hx + facing * head_r * 0.8
    along = facing * (xx - bx0)
    bill = (along >= 0) & (along <= bill_len) & (
        np.abs(yy - hy) <= 0.35 * head_r * (1.0 - along / max(bill_len, 1e-9)))

    body_col = _jitter(COLORS[attrs.body_color], rng)
    head_col = _jitter(COLORS[attrs.head_color], rng)
    img[:, body] = body_col[:, None]

    if attrs.wing_pattern == "striped":
        stripes = body & ((yy.astype(int) // 3) % 2 == 0)
        img[:, stripes] = (body_col * 0.45)[:, None]
    elif attrs.wing_pattern == "spotted":
        spots = np.zeros_like(body)
        for _ in range(8):
            sx = cx + rng.uniform(-0.7, 0.7) * s
            sy = cy + rng.uniform(-0.7, 0.7) * ry
            spots |= (xx - sx) ** 2 + (yy - sy) ** 2 <= 1.6 ** 2
        spots &= body
        img[:, spots] = (body_col * 0.4)[:, None]

    img[:, head] = head_col[:, None]
    img[:, bill] = np.asarray(BILL_COLOR)[:, None]

    img += rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    mask = body | head | bill
    ys, xs = np.nonzero(mask)
    box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return img, mask, box


# ---------------------------------------------------------------------------
# descriptions

OPENERS = (
    "this bird has",
    "the bird in the picture shows",
    "a small bird with",
    "here is a bird that has",
    "you can see a bird with",
)
BODY_PHRASES = (
    "a {body} body",
    "a mostly {body} belly and back",
    "{body} feathers covering its body",
)
HEAD_PHRASES = (
    "a {head} head",
    "a clearly {head} crown and cheeks",
    "its head colored {head}",
)
BILL_PHRASES = (
    "a {bill} bill",
    "a rather {bill} pointed beak",
)
PATTERN_PHRASES = {
    "plain": ("plain unmarked wings", "smooth wings without any markings"),
    "striped": ("wings marked with dark stripes", "clearly striped wings"),
    "spotted": ("wings covered in small dark spots", "visibly spotted wings"),
}
DISTRACTORS = (
    "perched on a thin branch",
    "standing near some scattered leaves",
    "seen against a cluttered background",
    "facing off to one side",
    "resting quietly out in the open",
    "photographed from a short distance away",
)


def make_descriptions(attrs: ClassAttributes, rng: np.random.Generator,
                      count: int = 10) -> list[str]:
    """Templated sentences mentioning all four attributes, >= 10 words each."""
    out = []
    for _ in range(count):
        opener = OPENERS[rng.integers(len(OPENERS))]
        body = BODY_PHRASES[rng.integers(len(BODY_PHRASES))].format(body=attrs.body_color)
        head = HEAD_PHRASES[rng.integers(len(HEAD_PHRASES))].format(head=attrs.head_color)
        bill = BILL_PHRASES[rng.integers(len(BILL_PHRASES))].format(bill=attrs.bill)
        pat = PATTERN_PHRASES[attrs.wing_pattern][
            rng.integers(len(PATTERN_PHRASES[attrs.wing_pattern]))]
        tail = DISTRACTORS[rng.integers(len(DISTRACTORS))]
        sentence = f"{opener} {body}, {head} and {bill}, with {pat}, {tail}."
        while len(sentence.split()) < 10:
            sentence = sentence[:-1] + f", {DISTRACTORS[rng.integers(len(DISTRACTORS))]}."
        out.append(sentence)
    return out


# ---------------------------------------------------------------------------
# image files (binary PPM)


def save_ppm(path: Path, pixels: np.ndarray) -> None:
    """pixels: (3, H, W) floats in [0,1] -> 8-bit binary PPM."""
    _, h, w = pixels.shape
    data = np.round(pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ManifestError(f"{path}: not a binary PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = fh.read(w * h * 3)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# generation


def _split_assignment(n: int, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n)
    n_train = int(round(n * SPLIT_FRACTIONS["train"]))
    n_val = int(round(n * SPLIT_FRACTIONS["val"]))
    splits = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def generate_synthetic(spec: SynthSpec, out_dir: Path) -> list[SampleRecord]:
    """Render the dataset under out_dir and write its manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "descriptions").mkdir(parents=True, exist_ok=True)
    table = class_attribute_table(spec)
    global_rng = np.random.default_rng(spec.seed)

    records: list[SampleRecord] = []
    image_index = 0
    for label, attrs in enumerate(table):
        splits = _split_assignment(spec.images_per_class, global_rng)
        for i in range(spec.images_per_class):
            rng = np.random.default_rng(spec.seed ^ image_index)
            img, _, box = render_sample(attrs, spec.clutter_level, rng)
            descriptions = make_descriptions(attrs, rng)
            image_id = f"c{label:03d}_i{i:03d}"
            rel_img = Path("images") / f"{image_id}.ppm"
            save_ppm(out_dir / rel_img, img)
            with open(out_dir / "descriptions" / f"{image_id}.txt", "w") as fh:
                fh.write("\n".join(descriptions) + "\n")
            records.append(SampleRecord(
                image_id=image_id, image_path=out_dir / rel_img, label=label,
                split=splits[i], descriptions=descriptions, gt_box=box))
            image_index += 1

    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "path", "label", "split", "x0", "y0", "x1", "y1"])
        for r in records:
            writer.writerow([
                r.image_id, str(Path("images") / f"{r.image_id}.ppm"), r.label,
                r.split, r.gt_box.x0, r.gt_box.y0, r.gt_box.x1, r.gt_box.y1])
    return records


# ---------------------------------------------------------------------------
# manifest loading


def load_manifest(path: Path) -> list[SampleRecord]:
    """Parse and validate a manifest; descriptions are loaded alongside."""
    path = Path(path)
    root = path.parent
    records: list[SampleRecord] = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    expected = ["image_id", "path", "label", "split", "x0", "y0", "x1", "y1"]
    if header != expected:
        raise ManifestError(f"line 1: bad header {header}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 8:
            raise ManifestError(f"line {lineno}: expected 8 fields, got {len(row)}")
        image_id, rel_path, label_s, split, *coords = row
        try:
            label = int(label_s)
            x0, y0, x1, y1 = (int(c) for c in coords)
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        if split not in SPLIT_FRACTIONS:
            raise ManifestError(f"line {lineno}: unknown split {split!r}")
        try:
            box = BoundingBox(x0, y0, x1, y1)
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        desc_path = root / "descriptions" / f"{image_id}.txt"
        if not desc_path.exists():
            raise ManifestError(f"line {lineno}: missing descriptions for {image_id}")
        descriptions = [ln for ln in desc_path.read_text().splitlines() if ln.strip()]
        if len(descriptions) != 10:
            raise ManifestError(
                f"line {lineno}: {image_id} has {len(descriptions)} descriptions, need 10")
        for d in descriptions:
            if len(d.split()) < 10:
                raise ManifestError(f"line {lineno}: {image_id} description under 10 words")
        records.append(SampleRecord(
            image_id=image_id, image_path=root / rel_path, label=label,
            split=split, descriptions=descriptions, gt_box=box))
    return records


def load_images(records: Sequence[SampleRecord]) -> np.ndarray:
    """(N, 3, H, W) stack of the records' images."""
    return np.stack([load_ppm(r.image_path) for r in records])


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"CVL1"


def save_checkpoint(path: Path, entries: dict[str, np.ndarray]) -> None:
    """Named tensors -> binary container; values stored as little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    """Inverse of save_checkpoint; returns float64 arrays (f32-rounded values)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated at byte {off}")
        out = blob[off : off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(shape)) if rank else 1
        vals = np.frombuffer(take(4 * n_vals), dtype="<f4")
        if name in entries:
            raise CheckpointFormatError(f"{path}: duplicate entry {name!r}")
        entries[name] = vals.astype(np.float64).reshape(shape)
    return entries
