"""Synthetic bi-modal segmentation tasks.

Every sample is a 32x32 grayscale image containing one target shape (the
mask), one or two distractor shapes from other families, and a textured
background. Shapes are rasterised from analytic predicates on pixel
centres, so mask membership is exactly checkable. Each sample draws from
its own RNG stream keyed by (task seed, split, index): regenerating any
sample, split, or dataset is bit-identical and order-independent.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import IMAGE_SIDE, WORD_TO_ID

FAMILIES = ("disc", "ellipse", "ring", "bar", "blob", "cross")
POSITION_RULES = ("anywhere", "left-half", "right-half", "center")
N_TEXTURES = 4

# Each family fills its shapes from its own brightness band. Neighbouring
# bands overlap by 0.03, so a minority of draws are genuinely ambiguous in
# brightness and only the outline geometry can resolve them; every band sits
# clear of the backgrounds, which stay below 0.30. This is what makes a task
# pair like "segment discs" then "segment bars, discs are clutter" conflict:
# the brightness-to-label rule flips between tasks and must be carried by
# the prompt pathway.
FILL_BANDS = {
    "disc": (0.84, 0.97),
    "ellipse": (0.74, 0.87),
    "ring": (0.64, 0.77),
    "bar": (0.54, 0.67),
    "blob": (0.44, 0.57),
    "cross": (0.34, 0.47),
}

_Y, _X = np.meshgrid(np.arange(IMAGE_SIDE) + 0.5,
                     np.arange(IMAGE_SIDE) + 0.5, indexing="ij")


class GenerationError(RuntimeError):
    """A task spec could not be satisfied within the retry budget."""


@dataclass
class TaskSpec:
    name: str
    family: str
    prompt: str
    position_rule: str = "anywhere"
    size_range: tuple = (0.04, 0.10)
    texture: int = 1
    counts: tuple = (200, 40, 40)
    seed: int = 0
    distractors: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES and self.family != "any":
            raise ValueError(f"unknown family {self.family!r}")
        if self.position_rule not in POSITION_RULES:
            raise ValueError(f"unknown position rule {self.position_rule!r}")
        lo, hi = self.size_range
        if not (0.0 < lo < hi < 0.5):
            raise ValueError(f"size range {self.size_range} invalid")
        if not (0 <= self.texture < N_TEXTURES):
            raise ValueError(f"texture id {self.texture} out of range")
        if any(c < 1 for c in self.counts) or len(self.counts) != 3:
            raise ValueError("counts must be three positive integers")
        for w in self.prompt.split():
            if w not in WORD_TO_ID:
                raise ValueError(f"prompt word {w!r} not in the vocabulary")


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    task: str = ""


# -- analytic rasterisers ----------------------------------------------------

def raster_disc(cx, cy, r):
    return (_X - cx) ** 2 + (_Y - cy) ** 2 < r ** 2


def raster_ellipse(cx, cy, rx, ry, theta):
    u = (_X - cx) * np.cos(theta) + (_Y - cy) * np.sin(theta)
    v = -(_X - cx) * np.sin(theta) + (_Y - cy) * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 < 1.0


def raster_ring(cx, cy, r_out, r_in):
    d2 = (_X - cx) ** 2 + (_Y - cy) ** 2
    return (d2 < r_out ** 2) & (d2 >= r_in ** 2)


def raster_bar(cx, cy, length, width, theta):
    u = (_X - cx) * np.cos(theta) + (_Y - cy) * np.sin(theta)
    v = -(_X - cx) * np.sin(theta) + (_Y - cy) * np.cos(theta)
    return (np.abs(u) < length / 2) & (np.abs(v) < width / 2)


def raster_blob(centers, radii):
    out = np.zeros_like(_X, dtype=bool)
    for (cx, cy), r in zip(centers, radii):
        out |= raster_disc(cx, cy, r)
    return out


def raster_cross(cx, cy, length, width, theta):
    return raster_bar(cx, cy, length, width, theta) \
        | raster_bar(cx, cy, length, width, theta + np.pi / 2)


def _sample_shape(rng, family, area):
    """Draw geometry for one shape of roughly the given pixel area."""
    if family == "disc":
        r = np.sqrt(area / np.pi)
        return lambda cx, cy: raster_disc(cx, cy, r)
    if family == "ellipse":
        q = rng.uniform(1.6, 2.4)
        rx = np.sqrt(area * q / np.pi)
        theta = rng.uniform(0, np.pi)
        return lambda cx, cy: raster_ellipse(cx, cy, rx, rx / q, theta)
    if family == "ring":
        r_out = np.sqrt(area / (np.pi * (1.0 - 0.55 ** 2)))
        return lambda cx, cy: raster_ring(cx, cy, r_out, 0.55 * r_out)
    if family == "bar":
        q = rng.uniform(5.0, 8.0)
        length = np.sqrt(area * q)
        theta = rng.uniform(0, np.pi)
        return lambda cx, cy: raster_bar(cx, cy, length, length / q, theta)
    if family == "blob":
        r0 = np.sqrt(area / (np.pi * 1.6))
        offs = rng.uniform(-0.9, 0.9, size=(3, 2)) * r0
        radii = rng.uniform(0.7, 1.0, size=3) * r0
        return lambda cx, cy: raster_blob(
            [(cx + ox, cy + oy) for ox, oy in offs], radii)
    if family == "cross":
        q = rng.uniform(3.5, 5.0)
        width = np.sqrt(area / (2 * q - 1))
        theta = rng.uniform(0, np.pi / 2)
        return lambda cx, cy: raster_cross(cx, cy, q * width, width, theta)
    raise ValueError(f"unknown family {family!r}")


def _draw_center(rng, rule):
    if rule == "left-half":
        return rng.uniform(5, 12), rng.uniform(6, 26)
    if rule == "right-half":
        return rng.uniform(20, 27), rng.uniform(6, 26)
    if rule == "center":
        return rng.uniform(14, 18), rng.uniform(14, 18)
    return rng.uniform(6, 26), rng.uniform(6, 26)


def _centroid_ok(mask, rule):
    cols = _X[mask]
    rows = _Y[mask]
    if rule == "left-half":
        return cols.mean() < 16.0
    if rule == "right-half":
        return cols.mean() >= 16.0
    if rule == "center":
        return abs(cols.mean() - 16.0) < 4.0 and abs(rows.mean() - 16.0) < 4.0
    return True


def _background(rng, style):
    # all styles stay below 0.30 so every fill band reads as foreground
    if style == 0:
        return np.full((IMAGE_SIDE, IMAGE_SIDE), rng.uniform(0.06, 0.16))
    if style == 1:
        return rng.uniform(0.02, 0.28, (IMAGE_SIDE, IMAGE_SIDE))
    if style == 2:
        lo, hi = rng.uniform(0.04, 0.10), rng.uniform(0.18, 0.28)
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (_X * np.cos(theta) + _Y * np.sin(theta))
        ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
        return lo + (hi - lo) * ramp
    bg = np.full((IMAGE_SIDE, IMAGE_SIDE), rng.uniform(0.06, 0.16))
    n_dots = rng.integers(40, 80)
    ys = rng.integers(0, IMAGE_SIDE, n_dots)
    xs = rng.integers(0, IMAGE_SIDE, n_dots)
    bg[ys, xs] = rng.uniform(0.22, 0.30, n_dots)
    return bg


def _generate_sample(spec, rng):
    family = spec.family
    if family == "any":
        family = FAMILIES[rng.integers(0, len(FAMILIES))]
    lo, hi = spec.size_range
    total = IMAGE_SIDE * IMAGE_SIDE

    mask = None
    for _ in range(100):
        area = rng.uniform(lo, hi) * total
        shape = _sample_shape(rng, family, area)
        cx, cy = _draw_center(rng, spec.position_rule)
        cand = shape(cx, cy)
        count = int(cand.sum())
        if count < 4 or count > 3.0 * hi * total:
            continue
        if _centroid_ok(cand, spec.position_rule):
            mask = cand
            break
    if mask is None:
        raise GenerationError(
            f"task {spec.name!r}: no valid placement in 100 attempts")

    image = _background(rng, spec.texture)
    if spec.distractors:
        others = [f for f in FAMILIES if f != family]
        for _ in range(int(rng.integers(1, 3))):
            dfam = others[rng.integers(0, len(others))]
            darea = rng.uniform(0.03, 0.08) * total
            dmask = _sample_shape(rng, dfam, darea)(
                rng.uniform(5, 27), rng.uniform(5, 27))
            image[dmask] = rng.uniform(0.65, 0.95)
    image[mask] = rng.uniform(0.65, 0.95)
    image = np.clip(image + rng.normal(0, 0.02, image.shape), 0.0, 1.0)
    return Sample(image=image, mask=mask.astype(np.float64))


def sample_at(spec, split, index):
    """Regenerate one sample from its (seed, split, index) stream."""
    split_id = ("train", "val", "test").index(split)
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, split_id, index]))
    return _generate_sample(spec, rng)


def generate(spec):
    """All three splits for a task spec. Bit-identical for equal specs."""
    out = {}
    for split, count in zip(("train", "val", "test"), spec.counts):
        out[split] = [sample_at(spec, split, i) for i in range(count)]
    return out


def pretext_dataset(n_train=512, n_val=64, seed=900):
    """Generic pretraining data: any family, no distractors, one prompt."""
    spec = TaskSpec(name="pretext", family="any", prompt="object",
                    position_rule="anywhere", size_range=(0.05, 0.15),
                    texture=1, counts=(n_train, n_val, 1), seed=seed,
                    distractors=False)
    def varied(split, count):
        # pretext cycles texture per index for background diversity
        samples = []
        for i in range(count):
            sub = TaskSpec(**{**asdict(spec), "texture": i % N_TEXTURES})
            samples.append(sample_at(sub, split, i))
        return samples
    return {"train": varied("train", n_train), "val": varied("val", n_val)}


def default_suites():
    """The three committed five-task suites."""
    homogeneous = [
        TaskSpec("h1-disc-center", "disc", "one small round disc center",
                 "center", (0.05, 0.11), 1, seed=1101),
        TaskSpec("h2-disc-left", "disc", "one small round disc left",
                 "left-half", (0.05, 0.11), 2, seed=1102),
        TaskSpec("h3-disc-right", "disc", "one small round disc right",
                 "right-half", (0.05, 0.11), 1, seed=1103),
        TaskSpec("h4-disc-large", "disc", "one large round disc center",
                 "center", (0.11, 0.18), 3, seed=1104),
        TaskSpec("h5-ellipse-center", "ellipse",
                 "one small round ellipse center",
                 "center", (0.05, 0.11), 0, seed=1105),
    ]
    heterogeneous = [
        TaskSpec("e1-disc", "disc", "one small round disc left",
                 "left-half", (0.05, 0.11), 1, seed=1201),
        TaskSpec("e2-ellipse", "ellipse", "two large oval ellipse right",
                 "right-half", (0.08, 0.16), 2, seed=1202),
        TaskSpec("e3-ring", "ring", "single thin hollow ring center",
                 "center", (0.05, 0.10), 1, seed=1203),
        TaskSpec("e4-bar", "bar", "lone wide flat bar bottom",
                 "anywhere", (0.04, 0.09), 3, seed=1204),
        TaskSpec("e5-blob", "blob", "some rough dense blob top",
                 "anywhere", (0.05, 0.11), 0, seed=1205),
    ]
    mixed = [
        TaskSpec("m1-disc-left", "disc", "one small round disc left",
                 "left-half", (0.05, 0.11), 1, seed=1301),
        TaskSpec("m2-bar-right", "bar", "lone wide flat bar right",
                 "right-half", (0.04, 0.09), 2, seed=1302),
        TaskSpec("m3-disc-right", "disc", "one small round disc right",
                 "right-half", (0.05, 0.11), 1, seed=1303),
        TaskSpec("m4-ring-center", "ring", "single thin hollow ring center",
                 "center", (0.05, 0.10), 3, seed=1304),
        TaskSpec("m5-ellipse", "ellipse", "one small oval ellipse right",
                 "anywhere", (0.06, 0.12), 0, seed=1305),
    ]
    return {"homogeneous": homogeneous, "heterogeneous": heterogeneous,
            "mixed": mixed}


def load_suite(name_or_path):
    """A committed suite by name, or task specs from a JSON file."""
    suites = default_suites()
    if name_or_path in suites:
        return suites[name_or_path]
    if not os.path.exists(name_or_path):
        raise ValueError(
            f"suite {name_or_path!r} is neither a known suite "
            f"({', '.join(sorted(suites))}) nor a spec file")
    with open(name_or_path) as f:
        raw = json.load(f)
    if not isinstance(raw, list) or not raw:
        raise ValueError("custom suite file must hold a non-empty list")
    specs = []
    for entry in raw:
        entry = dict(entry)
        for key in ("size_range", "counts"):
            if key in entry:
                entry[key] = tuple(entry[key])
        specs.append(TaskSpec(**entry))
    return specs


# -- raw export / import -----------------------------------------------------

def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def export_dataset(specs, out_dir):
    """Write raw little-endian float64 arrays plus a checksummed manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"version": 1, "tasks": []}
    for spec in specs:
        data = generate(spec)
        entry = {"spec": asdict(spec), "splits": {}}
        for split, samples in data.items():
            images = np.stack([s.image for s in samples]).astype("<f8")
            masks = np.stack([s.mask for s in samples]).astype("<f8")
            img_name = f"{spec.name}_{split}_images.f64"
            msk_name = f"{spec.name}_{split}_masks.f64"
            img_bytes = images.tobytes()
            msk_bytes = masks.tobytes()
            with open(os.path.join(out_dir, img_name), "wb") as f:
                f.write(img_bytes)
            with open(os.path.join(out_dir, msk_name), "wb") as f:
                f.write(msk_bytes)
            entry["splits"][split] = {
                "images": img_name, "masks": msk_name, "count": len(samples),
                "sha256_images": _sha256(img_bytes),
                "sha256_masks": _sha256(msk_bytes),
            }
        manifest["tasks"].append(entry)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def import_dataset(in_dir):
    """Read an exported dataset back, verifying every checksum."""
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("version") != 1:
        raise ValueError("unsupported dataset manifest version")
    out = []
    for entry in manifest["tasks"]:
        raw = dict(entry["spec"])
        raw["size_range"] = tuple(raw["size_range"])
        raw["counts"] = tuple(raw["counts"])
        spec = TaskSpec(**raw)
        splits = {}
        for split, meta in entry["splits"].items():
            with open(os.path.join(in_dir, meta["images"]), "rb") as f:
                img_bytes = f.read()
            with open(os.path.join(in_dir, meta["masks"]), "rb") as f:
                msk_bytes = f.read()
            if _sha256(img_bytes) != meta["sha256_images"] \
                    or _sha256(msk_bytes) != meta["sha256_masks"]:
                raise ValueError(f"checksum mismatch for {spec.name}/{split}")
            n = meta["count"]
            images = np.frombuffer(img_bytes, dtype="<f8").reshape(
                n, IMAGE_SIDE, IMAGE_SIDE)
            masks = np.frombuffer(msk_bytes, dtype="<f8").reshape(
                n, IMAGE_SIDE, IMAGE_SIDE)
            splits[split] = [Sample(image=images[i].copy(),
                                    mask=masks[i].copy()) for i in range(n)]
        out.append((spec, splits))
    return out


_DATASET_CACHE = {}


def cached_dataset(spec):
    """Process-wide dataset cache; generation is deterministic per spec."""
    key = json.dumps(asdict(spec), sort_keys=True)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE[key] = generate(spec)
    return _DATASET_CACHE[key]
