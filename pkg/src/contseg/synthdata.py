"""Synthetic panoptic scenes: colored shapes on a neutral background.

Each class owns an appearance vector (one mean per image channel).
Scenes place non-overlapping rectangles and discrete circles, paint
them with the owning class appearance plus uniform noise, and record
one binary mask per segment. Generation is fully determined by the
seed, the palette, the requested classes, and the geometry.

The module also owns the on-disk dataset format: a container file of
binary records (magic ``CMFD``) with run-length-encoded masks, plus a
JSON manifest describing palette, geometry, and per-sample seeds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError, PlacementError

DATA_MAGIC = b"CMFD"
DATA_FORMAT_VERSION = 1

# appearance of pixels no segment owns
NEUTRAL_LEVEL = 0.5
NOISE_AMPLITUDE = 0.05
PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class ClassDef:
    """One palette entry. `kind` is "thing" or "stuff"."""

    class_id: int
    kind: str
    appearance: tuple[float, ...]


@dataclass(frozen=True)
class SceneGeometry:
    height: int
    width: int
    max_instances: int = 2


@dataclass
class Segment:
    class_id: int
    mask: np.ndarray  # bool (H, W)


@dataclass
class SceneSample:
    image: np.ndarray  # float64 (C, H, W)
    segments: list[Segment]
    seed: int | None = None

    def present_classes(self) -> set[int]:
        return {seg.class_id for seg in self.segments}


def make_palette(num_classes: int, num_things: int, channels: int = 3) -> list[ClassDef]:
    """Build a palette of well-separated appearance vectors.

    Candidate vectors live on the grid {0.1, 0.3, 0.5, 0.7, 0.9} per
    channel, so two distinct classes always differ by at least 0.2 in
    some channel. The all-neutral point is reserved for unowned pixels.
    Points far from neutral are assigned first. Classes 1..num_things
    are things, the rest are stuff.
    """
    if num_classes < 1 or not 0 <= num_things <= num_classes:
        raise ConfigError("bad palette sizes: %d classes, %d things"
                          % (num_classes, num_things))
    levels = (0.1, 0.3, 0.5, 0.7, 0.9)
    candidates = []
    for combo in np.stack(np.meshgrid(*[levels] * channels, indexing="ij"),
                          axis=-1).reshape(-1, channels):
        vec = tuple(round(float(v), 3) for v in combo)
        if all(v == NEUTRAL_LEVEL for v in vec):
            continue
        candidates.append(vec)
    candidates.sort(key=lambda vec: (-sum((v - NEUTRAL_LEVEL) ** 2 for v in vec), vec))
    if num_classes > len(candidates):
        raise ConfigError("palette supports at most %d classes with %d channels"
                          % (len(candidates), channels))
    palette = []
    for i in range(num_classes):
        kind = "thing" if i < num_things else "stuff"
        palette.append(ClassDef(class_id=i + 1, kind=kind, appearance=candidates[i]))
    return palette


def _circle_mask(h: int, w: int, cy: int, cx: int, radius: float) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius


def _rect_mask(h: int, w: int, top: int, left: int, rh: int, rw: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + rh, left:left + rw] = True
    return mask


def _draw_thing_shape(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    if rng.integers(0, 2) == 0:
        rh = int(rng.integers(2, min(6, h // 2 + 1)))
        rw = int(rng.integers(2, min(6, w // 2 + 1)))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        return _rect_mask(h, w, top, left, rh, rw)
    radius = 1.5 + 0.5 * float(rng.integers(0, 3))
    reach = int(radius)
    cy = int(rng.integers(reach, h - reach))
    cx = int(rng.integers(reach, w - reach))
    return _circle_mask(h, w, cy, cx, radius)


def _draw_stuff_shape(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # one connected band, either wide or tall
    if rng.integers(0, 2) == 0:
        rh = int(rng.integers(3, max(4, h // 3) + 1))
        rw = int(rng.integers(w // 2, w + 1))
    else:
        rh = int(rng.integers(h // 2, h + 1))
        rw = int(rng.integers(3, max(4, w // 3) + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return _rect_mask(h, w, top, left, rh, rw)


def generate_scene(seed: int, palette: list[ClassDef], present: set[int],
                   geometry: SceneGeometry) -> SceneSample:
    """Generate one scene containing every class in `present`.

    Stuff classes place one connected region each; thing classes place
    one to `max_instances` disjoint instances. Segments never overlap.
    Raises PlacementError when a segment cannot be placed within the
    attempt budget.
    """
    by_id = {c.class_id: c for c in palette}
    unknown = set(present) - set(by_id)
    if unknown:
        raise ConfigError("present classes not in palette: %s" % sorted(unknown))
    h, w = geometry.height, geometry.width
    if h < 8 or w < 8:
        raise ConfigError("scene grid must be at least 8x8, got %dx%d" % (h, w))
    channels = len(palette[0].appearance) if palette else 3

    rng = np.random.default_rng(seed)
    occupied = np.zeros((h, w), dtype=bool)
    segments: list[Segment] = []

    # big stuff regions first, then things, each in ascending class order
    ordered = sorted(present, key=lambda cid: (by_id[cid].kind != "stuff", cid))
    for cid in ordered:
        cdef = by_id[cid]
        if cdef.kind == "stuff":
            count = 1
        else:
            count = int(rng.integers(1, geometry.max_instances + 1))
        for _ in range(count):
            placed = False
            for _ in range(PLACEMENT_ATTEMPTS):
                if cdef.kind == "stuff":
                    mask = _draw_stuff_shape(rng, h, w)
                else:
                    mask = _draw_thing_shape(rng, h, w)
                if not (mask & occupied).any():
                    occupied |= mask
                    segments.append(Segment(class_id=cid, mask=mask))
                    placed = True
                    break
            if not placed:
                raise PlacementError(
                    "could not place a segment of class %d after %d attempts"
                    % (cid, PLACEMENT_ATTEMPTS))

    image = np.full((channels, h, w), NEUTRAL_LEVEL, dtype=np.float64)
    for seg in segments:
        appearance = np.array(by_id[seg.class_id].appearance, dtype=np.float64)
        image[:, seg.mask] = appearance[:, None]
    image += rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=image.shape)
    return SceneSample(image=image, segments=segments, seed=seed)


def filter_annotations(sample: SceneSample, current: set[int]) -> SceneSample:
    """Keep only segments whose class is in `current`; image unchanged."""
    kept = [seg for seg in sample.segments if seg.class_id in current]
    return SceneSample(image=sample.image, segments=kept, seed=sample.seed)


def to_semantic(segments: list[Segment], height: int, width: int) -> np.ndarray:
    """Merge segment masks into a label map; 0 means unlabeled.

    Raises IntegrityError if any two masks overlap.
    """
    labels = np.zeros((height, width), dtype=np.int64)
    claimed = np.zeros((height, width), dtype=bool)
    for seg in segments:
        if seg.mask.shape != (height, width):
            raise IntegrityError("segment mask shape %s does not match %s"
                                 % (seg.mask.shape, (height, width)))
        if (claimed & seg.mask).any():
            raise IntegrityError("segments overlap in to_semantic")
        claimed |= seg.mask
        labels[seg.mask] = seg.class_id
    return labels


def generate_dataset(palette: list[ClassDef], samples_per_class: int,
                     geometry: SceneGeometry, seed: int,
                     max_extra_classes: int = 2) -> list[SceneSample]:
    """Generate `samples_per_class` scenes anchored on each class.

    Every scene contains its anchor class plus up to `max_extra_classes`
    other random classes, so each class is guaranteed coverage while
    classes still co-occur. Fully determined by `seed`.
    """
    ids = [c.class_id for c in palette]
    compose_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    samples = []
    for cid in ids:
        others = [i for i in ids if i != cid]
        for k in range(samples_per_class):
            extra = int(compose_rng.integers(0, max_extra_classes + 1))
            extra = min(extra, len(others))
            chosen = compose_rng.choice(others, size=extra, replace=False) if extra else []
            present = {cid, *(int(x) for x in chosen)}
            for attempt in range(20):
                scene_seed = int(np.random.SeedSequence(
                    [seed, 2, cid, k, attempt]).generate_state(1)[0])
                try:
                    samples.append(generate_scene(scene_seed, palette, present, geometry))
                    break
                except PlacementError:
                    if attempt == 19:
                        raise
    return samples


# -- run-length encoding -------------------------------------------------


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Row-major run lengths, zeros first; runs sum to the pixel count."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    positions = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(positions)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, height: int, width: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != height * width:
        raise IntegrityError("run lengths sum to %d, expected %d"
                             % (runs.sum(), height * width))
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += int(run)
        value = not value
    return flat.reshape(height, width)


# -- container file ------------------------------------------------------


def write_records(path: str | Path, samples: list[SceneSample]) -> None:
    """Write samples as consecutive binary records."""
    with open(path, "wb") as fh:
        for sample in samples:
            channels, h, w = sample.image.shape
            if len(sample.segments) > 0xFFFF:
                raise IntegrityError("too many segments for one record")
            fh.write(DATA_MAGIC)
            fh.write(struct.pack("<HHHHH", DATA_FORMAT_VERSION, channels, h, w,
                                 len(sample.segments)))
            fh.write(sample.image.astype("<f8").tobytes(order="C"))
            for seg in sample.segments:
                runs = rle_encode(seg.mask)
                fh.write(struct.pack("<HI", seg.class_id, len(runs)))
                fh.write(runs.astype("<u4").tobytes())


def read_records(path: str | Path) -> list[SceneSample]:
    data = Path(path).read_bytes()
    samples = []
    pos = 0
    while pos < len(data):
        if data[pos:pos + 4] != DATA_MAGIC:
            raise IntegrityError("bad record magic at offset %d" % pos)
        pos += 4
        version, channels, h, w, n_segments = struct.unpack_from("<HHHHH", data, pos)
        if version != DATA_FORMAT_VERSION:
            raise IntegrityError("unsupported record version %d" % version)
        pos += 10
        count = channels * h * w
        image = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        image = image.reshape(channels, h, w).astype(np.float64)
        pos += count * 8
        segments = []
        for _ in range(n_segments):
            class_id, n_runs = struct.unpack_from("<HI", data, pos)
            pos += 6
            runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=pos)
            pos += n_runs * 4
            segments.append(Segment(class_id=class_id, mask=rle_decode(runs, h, w)))
        samples.append(SceneSample(image=image, segments=segments))
    return samples


def write_dataset(out_dir: str | Path, palette: list[ClassDef],
                  splits: dict[str, list[SceneSample]],
                  geometry: SceneGeometry, seed: int) -> None:
    """Write one container file per split plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "cmfd",
        "version": DATA_FORMAT_VERSION,
        "seed": int(seed),
        "geometry": {"height": geometry.height, "width": geometry.width,
                     "max_instances": geometry.max_instances},
        "palette": [{"class_id": c.class_id, "kind": c.kind,
                     "appearance": list(c.appearance)} for c in palette],
        "splits": {},
    }
    for name, samples in splits.items():
        filename = "%s.cmfd" % name
        write_records(out / filename, samples)
        manifest["splits"][name] = {
            "file": filename,
            "count": len(samples),
            "seeds": [s.seed for s in samples],
        }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(in_dir: str | Path):
    """Read a dataset directory; returns (palette, splits, manifest)."""
    root = Path(in_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    palette = [ClassDef(class_id=int(p["class_id"]), kind=p["kind"],
                        appearance=tuple(p["appearance"]))
               for p in manifest["palette"]]
    splits = {}
    for name, info in manifest["splits"].items():
        samples = read_records(root / info["file"])
        for sample, s in zip(samples, info["seeds"]):
            sample.seed = s
        splits[name] = samples
    return palette, splits, manifest
