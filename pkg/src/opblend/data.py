"""Image reading/writing, synthetic effect-label generation and dataset
manifests.

Images are binary PGM (P5, grayscale) or PPM (P6, RGB) at 8 bits, decoded to
float32 values in [0, 1] by dividing by 255. PNG is read/written through
Pillow when it is installed. A dataset manifest is a line-oriented text
file: a ``#effect <name> <strength>`` header followed by
``input<TAB>label<TAB>split`` records with paths relative to the manifest.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ImageBuffer",
    "ImageFormatError",
    "ImageTruncatedError",
    "DatasetError",
    "ManifestRecord",
    "DatasetManifest",
    "EFFECT_GENERATORS",
    "read_image",
    "write_image",
    "gaussian_label",
    "make_dataset",
    "load_manifest",
    "save_manifest",
    "sample_patches",
    "to_nchw",
    "from_nchw",
]

_RASTER_SUFFIXES = (".pgm", ".ppm")


class ImageFormatError(ValueError):
    """The file is not a supported image (bad magic, header or mode)."""


class ImageTruncatedError(ValueError):
    """The file ends before the declared raster data."""


class DatasetError(ValueError):
    """A manifest or its referenced files are unusable."""


@dataclass(frozen=True)
class ImageBuffer:
    """An (H, W, C) float32 image with values in [0, 1], C of 1 or 3."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, C) with C in (1, 3), got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got shape {v.shape}")
        if v.dtype != np.float32:
            object.__setattr__(self, "values", v.astype(np.float32))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def to_nchw(img: ImageBuffer) -> np.ndarray:
    """(H, W, C) image to a (1, C, H, W) float32 array."""
    return np.ascontiguousarray(img.values.transpose(2, 0, 1)[None])


def from_nchw(arr: np.ndarray, clip: bool = True) -> ImageBuffer:
    """(1, C, H, W) array back to an image, clamping into [0, 1] by default."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != 4 or a.shape[0] != 1:
        raise ValueError(f"expected a (1, C, H, W) array, got shape {a.shape}")
    v = a[0].transpose(1, 2, 0)
    if clip:
        v = np.clip(v, 0.0, 1.0)
    return ImageBuffer(np.ascontiguousarray(v))


# ---------------------------------------------------------------------------
# PGM / PPM / PNG
# ---------------------------------------------------------------------------

def _read_header_token(f) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ImageTruncatedError("unexpected end of file inside header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_image(path) -> ImageBuffer:
    """Decode a binary PGM/PPM (or PNG via Pillow) into [0, 1] floats."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    with open(path, "rb") as f:
        magic = _read_header_token(f)
        if magic == b"P5":
            channels = 1
        elif magic == b"P6":
            channels = 3
        else:
            raise ImageFormatError(
                f"{path}: unsupported magic {magic!r}; expected binary PGM (P5) or PPM (P6)"
            )
        try:
            width = int(_read_header_token(f))
            height = int(_read_header_token(f))
            maxval = int(_read_header_token(f))
        except ValueError as e:
            raise ImageFormatError(f"{path}: malformed header: {e}") from None
        if width < 1 or height < 1:
            raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
        if maxval != 255:
            raise ImageFormatError(f"{path}: only 8-bit images (maxval 255) supported, got {maxval}")
        need = width * height * channels
        raster = f.read(need)
        if len(raster) < need:
            raise ImageTruncatedError(
                f"{path}: raster truncated, expected {need} bytes, got {len(raster)}"
            )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(arr.astype(np.float32) / 255.0)


def write_image(img: ImageBuffer, path) -> None:
    """Quantize to 8 bits (clamping into [0, 1]) and write PGM/PPM/PNG."""
    path = Path(path)
    q = np.round(np.clip(img.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    if path.suffix.lower() == ".png":
        _write_png(q, path)
        return
    magic = b"P5" if img.channels == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (img.width, img.height))
        f.write(q.tobytes())


def _read_png(path: Path) -> ImageBuffer:
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: PNG support requires Pillow") from None
    with Image.open(path) as im:
        mode = "L" if im.mode in ("1", "L", "I", "I;16") else "RGB"
        arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageBuffer(arr)


def _write_png(q: np.ndarray, path: Path) -> None:
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: PNG support requires Pillow") from None
    Image.fromarray(q[:, :, 0] if q.shape[2] == 1 else q).save(path)


# ---------------------------------------------------------------------------
# effect labels
# ---------------------------------------------------------------------------

def gaussian_label(img: ImageBuffer, sigma: float) -> ImageBuffer:
    """Separable Gaussian blur with edge replication; sigma=0 is the identity.

    The kernel radius is ceil(3*sigma). A pure function of (image, sigma),
    so regenerating labels is reproducible.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return ImageBuffer(img.values.copy())
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-(xs**2) / (2.0 * sigma**2))
    kern /= kern.sum()

    vals = img.values.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(vals, pad, mode="edge")
        out = np.zeros_like(vals)
        for t, kv in enumerate(kern):
            sl = [slice(None)] * 3
            sl[axis] = slice(t, t + vals.shape[axis])
            out += kv * padded[tuple(sl)]
        vals = out
    return ImageBuffer(np.clip(vals, 0.0, 1.0).astype(np.float32))


EFFECT_GENERATORS = {
    "gaussian": gaussian_label,
    "identity": lambda img, strength: ImageBuffer(img.values.copy()),
}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    input_path: Path
    label_path: Path
    split: str


@dataclass
class DatasetManifest:
    """Input/label pairs with train/val split tags and the effect descriptor."""

    records: list[ManifestRecord]
    effect_name: str = "gaussian"
    effect_strength: float = 1.0
    path: Path | None = field(default=None, compare=False)

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split == "all":
            return list(self.records)
        if split not in ("train", "val"):
            raise ValueError(f"unknown split {split!r}; expected 'train', 'val' or 'all'")
        return [r for r in self.records if r.split == split]

    def validate(self) -> None:
        """Decode every referenced file and check per-record dimensions."""
        issues = []
        for r in self.records:
            try:
                inp = read_image(r.input_path)
                lab = read_image(r.label_path)
            except (OSError, ValueError) as e:
                issues.append(str(e))
                continue
            if inp.values.shape != lab.values.shape:
                issues.append(
                    f"{r.input_path}: input {inp.values.shape} vs label {lab.values.shape}"
                )
        if issues:
            raise DatasetError("manifest validation failed:\n  " + "\n  ".join(issues))

    def identity_variant(self) -> "DatasetManifest":
        """The same inputs paired with themselves (label := input)."""
        recs = [ManifestRecord(r.input_path, r.input_path, r.split) for r in self.records]
        return DatasetManifest(recs, "identity", 0.0, path=self.path)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.resolve().parent
    lines = [f"#effect {manifest.effect_name} {manifest.effect_strength:g}"]
    for r in manifest.records:
        rel_in = _relativize(r.input_path, base)
        rel_lab = _relativize(r.label_path, base)
        lines.append(f"{rel_in}\t{rel_lab}\t{r.split}")
    path.write_text("\n".join(lines) + "\n")
    manifest.path = path


def _relativize(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(Path(p).resolve())


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.resolve().parent
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#effect "):
        raise DatasetError(f"{path}: missing '#effect <name> <strength>' header")
    try:
        _, name, strength = lines[0].split()
        strength = float(strength)
    except ValueError:
        raise DatasetError(f"{path}: malformed effect header {lines[0]!r}") from None
    records = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("train", "val"):
            raise DatasetError(f"{path}:{i}: malformed record {line!r}")
        records.append(
            ManifestRecord(_resolve(parts[0], base), _resolve(parts[1], base), parts[2])
        )
    return DatasetManifest(records, name, strength, path=path)


def _resolve(p: str, base: Path) -> Path:
    q = Path(p)
    return q if q.is_absolute() else (base / q).resolve()


def make_dataset(
    inputs_dir,
    out_dir,
    effect_name: str = "gaussian",
    strength: float = 1.0,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> DatasetManifest:
    """Generate effect labels for every decodable image in a directory.

    Writes labels to ``out_dir/labels`` and a manifest to
    ``out_dir/manifest.tsv``. Deterministic in the input listing and seed, so
    a rerun reproduces identical labels and manifest. Unreadable inputs are
    skipped with a warning; an empty result is an error.
    """
    inputs_dir, out_dir = Path(inputs_dir), Path(out_dir)
    if effect_name not in EFFECT_GENERATORS:
        raise ValueError(f"unknown effect {effect_name!r}; known: {sorted(EFFECT_GENERATORS)}")
    generator = EFFECT_GENERATORS[effect_name]
    paths = sorted(
        p for p in inputs_dir.iterdir() if p.suffix.lower() in _RASTER_SUFFIXES + (".png",)
    )
    labels_dir = out_dir / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)

    usable = []
    for p in paths:
        try:
            img = read_image(p)
        except (OSError, ValueError) as e:
            warnings.warn(f"skipping unreadable input {p}: {e}", stacklevel=2)
            continue
        label = generator(img, strength)
        label_path = labels_dir / p.name
        write_image(label, label_path)
        usable.append((p.resolve(), label_path.resolve()))
    if not usable:
        raise DatasetError(f"{inputs_dir}: no decodable images found")

    n = len(usable)
    n_val = 0 if n < 2 else min(n - 1, max(1, round(val_fraction * n)))
    rng = np.random.default_rng(seed)
    val_idx = set(rng.choice(n, size=n_val, replace=False).tolist()) if n_val else set()
    records = [
        ManifestRecord(inp, lab, "val" if i in val_idx else "train")
        for i, (inp, lab) in enumerate(usable)
    ]
    manifest = DatasetManifest(records, effect_name, strength)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

def _load_pair_arrays(record: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
    x = read_image(record.input_path)
    y = read_image(record.label_path)
    if x.values.shape != y.values.shape:
        raise DatasetError(
            f"{record.input_path}: input {x.values.shape} vs label {y.values.shape}"
        )
    return x.values.transpose(2, 0, 1), y.values.transpose(2, 0, 1)


def sample_patches(
    manifest: DatasetManifest,
    patch: int,
    batch: int,
    rng,
    split: str = "train",
    cache: dict | None = None,
):
    """Draw a batch of aligned random (input, label) crops.

    Returns float32 arrays of shape (batch, C, patch, patch). Crops use
    identical coordinates in both images of a pair. ``cache`` maps record
    input paths to preloaded array pairs and is filled on demand.
    """
    if patch < 2 or patch % 2:
        raise ValueError(f"patch size must be even and >= 2, got {patch}")
    records = manifest.split_records(split)
    if not records:
        raise DatasetError(f"split {split!r} has no records")
    if cache is None:
        cache = {}
    pairs = []
    for r in records:
        key = str(r.input_path) + "|" + str(r.label_path)
        if key not in cache:
            cache[key] = _load_pair_arrays(r)
        pairs.append(cache[key])
    channels = pairs[0][0].shape[0]
    for (x, _), r in zip(pairs, records):
        if x.shape[0] != channels:
            raise DatasetError(f"{r.input_path}: channel count {x.shape[0]} != {channels}")
        if x.shape[1] < patch or x.shape[2] < patch:
            raise ValueError(
                f"patch {patch} exceeds image extents {x.shape[1]}x{x.shape[2]} "
                f"({r.input_path})"
            )
    xs = np.empty((batch, channels, patch, patch), dtype=np.float32)
    ys = np.empty_like(xs)
    for i in range(batch):
        x, y = pairs[int(rng.integers(len(pairs)))]
        r0 = int(rng.integers(x.shape[1] - patch + 1))
        c0 = int(rng.integers(x.shape[2] - patch + 1))
        xs[i] = x[:, r0 : r0 + patch, c0 : c0 + patch]
        ys[i] = y[:, r0 : r0 + patch, c0 : c0 + patch]
    return xs, ys
