"""Checkpoint representation and the model-blending algebra.

A :class:`ParamSet` is one trained model's weights: an ordered list of
(name, 4-D float array) entries. Two sets are blend-compatible when names,
order and shapes all match, and every blending operation reduces to the same
per-entry combination ``(ca*A + cb*B) / denom`` evaluated in float64 before
truncating back to the storage precision, which makes the endpoint
identities exact:

    interpolate   V = g*A + (1-g)*B            g=1 -> A,  g=0 -> B
    forward       V = (A - (1-a)*B) / a        a=1 -> A
    back          V = (B - b*A) / (1-b)        b=0 -> B
    forward_ts    V = ((1+a)*B - (1-a)*A)/(2a) a=1 -> B
    back_ts       V = ((1+b)*A - (1-b)*B)/(2b) b=1 -> A

The extrapolating modes divide by their coefficient (or its complement),
so those denominators are kept away from zero by ``epsilon_floor``.

Archive format (extension ``.cei``): magic ``CEI1``; u32 entry count;
per entry a length-prefixed UTF-8 name and four u32 shape extents; payload
of little-endian float32 values in manifest order; trailing CRC-32 of the
payload. All integers little-endian.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ParamSet",
    "BlendSpec",
    "CompatReport",
    "IncompatibleModelsError",
    "CoefficientError",
    "ArchiveError",
    "ArchiveVersionError",
    "ArchiveTruncatedError",
    "ArchiveChecksumError",
    "MODES",
    "interpolate",
    "extrapolate_onestep",
    "extrapolate_twostep",
    "blend",
    "compat_check",
    "save_archive",
    "load_archive",
]

MAGIC = b"CEI1"
MODES = ("interpolate", "forward", "back", "forward_ts", "back_ts")
DEFAULT_EPSILON_FLOOR = 0.05


class IncompatibleModelsError(ValueError):
    """The two parameter sets do not share names, order and shapes."""


class CoefficientError(ValueError):
    """A blending coefficient is outside its mode's legal range."""


class ArchiveError(ValueError):
    """Base class for archive read failures."""


class ArchiveVersionError(ArchiveError):
    """The file does not carry the expected magic/version."""


class ArchiveTruncatedError(ArchiveError):
    """The file ends before the declared content."""


class ArchiveChecksumError(ArchiveError):
    """The payload does not match its CRC-32."""


class ParamSet:
    """Ordered, named collection of 4-D parameter arrays (one model)."""

    __slots__ = ("_names", "_arrays", "meta")

    def __init__(self, entries, meta: dict | None = None):
        names = []
        arrays = []
        seen = set()
        for name, arr in entries:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            a = np.asarray(arr)
            if a.dtype not in (np.float32, np.float64):
                a = a.astype(np.float32)
            if a.ndim != 4:
                raise ValueError(f"parameter {name!r} must be 4-D, got shape {a.shape}")
            if a.flags.writeable:
                a = a.copy()
                a.flags.writeable = False
            names.append(name)
            arrays.append(a)
        self._names = tuple(names)
        self._arrays = tuple(arrays)
        self.meta = dict(meta or {})

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def entries(self) -> tuple[tuple[str, np.ndarray], ...]:
        return tuple(zip(self._names, self._arrays))

    def __len__(self) -> int:
        return len(self._names)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def fingerprint(self) -> tuple:
        """Architecture identity: the ordered (name, shape) list."""
        return tuple((n, a.shape) for n, a in zip(self._names, self._arrays))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(
            [(n, a.astype(dtype)) for n, a in zip(self._names, self._arrays)], self.meta
        )

    def same_values(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, shapes, dtypes and values."""
        if self._names != other._names:
            return False
        for a, b in zip(self._arrays, other._arrays):
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if a.tobytes() != b.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        n_values = sum(a.size for a in self._arrays)
        return f"ParamSet({len(self)} entries, {n_values} values)"


@dataclass(frozen=True)
class BlendSpec:
    """Blending mode plus its coefficient.

    ``coeff`` is the mode's control parameter in [0, 1]. ``epsilon_floor``
    bounds the denominators of the extrapolating modes away from zero:
    forward, forward_ts and back_ts require coeff >= floor, while back
    (which divides by 1-coeff) requires coeff <= 1 - floor.
    """

    mode: str
    coeff: float
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown blend mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.coeff <= 1.0:
            raise CoefficientError(f"coefficient {self.coeff} outside [0, 1]")
        if not 0.0 < self.epsilon_floor < 1.0:
            raise ValueError(f"epsilon_floor {self.epsilon_floor} outside (0, 1)")
        c, floor = self.coeff, self.epsilon_floor
        if self.mode in ("forward", "forward_ts", "back_ts") and c < floor:
            raise CoefficientError(
                f"{self.mode} coefficient {c} below epsilon floor {floor} "
                "(the denominator would blow up)"
            )
        if self.mode == "back" and 1.0 - c < floor:
            raise CoefficientError(
                f"back coefficient {c} leaves 1-coeff below epsilon floor {floor} "
                "(the denominator would blow up)"
            )


@dataclass
class CompatReport:
    """Per-entry comparison of two parameter sets."""

    ok: bool
    issues: list[str] = field(default_factory=list)

    @property
    def first_mismatch(self) -> str | None:
        return self.issues[0] if self.issues else None

    def __str__(self) -> str:
        if self.ok:
            return "compatible"
        return "incompatible:\n  " + "\n  ".join(self.issues)


def compat_check(a: ParamSet, b: ParamSet) -> CompatReport:
    """Report whether two parameter sets can be blended (names, order, shapes)."""
    issues = []
    for i, ((na, aa), (nb, ab)) in enumerate(zip(a.entries, b.entries)):
        if na != nb:
            issues.append(f"entry {i}: name {na!r} vs {nb!r}")
        elif aa.shape != ab.shape:
            issues.append(f"entry {i} ({na!r}): shape {aa.shape} vs {ab.shape}")
    if len(a) != len(b):
        issues.append(f"entry count: {len(a)} vs {len(b)}")
    return CompatReport(ok=not issues, issues=issues)


def _require_compatible(a: ParamSet, b: ParamSet) -> None:
    report = compat_check(a, b)
    if not report.ok:
        raise IncompatibleModelsError(str(report))


def _combine(a: ParamSet, b: ParamSet, ca: float, cb: float, denom: float) -> ParamSet:
    """Per-entry (ca*A + cb*B)/denom, accumulated in float64."""
    _require_compatible(a, b)
    out = []
    for (name, av), (_, bv) in zip(a.entries, b.entries):
        dtype = np.promote_types(av.dtype, bv.dtype)
        v = (ca * av.astype(np.float64) + cb * bv.astype(np.float64)) / denom
        out.append((name, v.astype(dtype)))
    return ParamSet(out, meta=dict(a.meta))


def interpolate(a: ParamSet, b: ParamSet, gamma: float) -> ParamSet:
    """V = gamma*A + (1-gamma)*B. gamma=1 copies A, gamma=0 copies B."""
    if not 0.0 <= gamma <= 1.0:
        raise CoefficientError(f"interpolation coefficient {gamma} outside [0, 1]")
    return _combine(a, b, gamma, 1.0 - gamma, 1.0)


def extrapolate_onestep(
    a: ParamSet,
    b: ParamSet,
    mode: str,
    coeff: float,
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR,
) -> ParamSet:
    """One-step extrapolation beyond the A..B segment.

    forward: V = (A - (1-a)*B)/a; back: V = (B - b*A)/(1-b).
    """
    if mode not in ("forward", "back"):
        raise ValueError(f"one-step mode must be 'forward' or 'back', got {mode!r}")
    BlendSpec(mode, coeff, epsilon_floor)
    if mode == "forward":
        return _combine(a, b, 1.0, -(1.0 - coeff), coeff)
    return _combine(a, b, -coeff, 1.0, 1.0 - coeff)


def extrapolate_twostep(
    a: ParamSet,
    b: ParamSet,
    mode: str,
    coeff: float,
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR,
) -> ParamSet:
    """Two-step extrapolation through the midpoint model.

    forward_ts: V = ((1+a)*B - (1-a)*A)/(2a); back_ts: V = ((1+b)*A - (1-b)*B)/(2b).
    Equivalent to a one-step extrapolation taken from the gamma=0.5 interpolant,
    which stays closer to the trained pair and damps artifacts such as color
    drift in the generated outputs.
    """
    if mode not in ("forward_ts", "back_ts"):
        raise ValueError(f"two-step mode must be 'forward_ts' or 'back_ts', got {mode!r}")
    BlendSpec(mode, coeff, epsilon_floor)
    if mode == "forward_ts":
        return _combine(a, b, -(1.0 - coeff), 1.0 + coeff, 2.0 * coeff)
    return _combine(a, b, 1.0 + coeff, -(1.0 - coeff), 2.0 * coeff)


def blend(a: ParamSet, b: ParamSet, spec: BlendSpec) -> ParamSet:
    """Dispatch a :class:`BlendSpec` to the matching operation."""
    if spec.mode == "interpolate":
        return interpolate(a, b, spec.coeff)
    if spec.mode in ("forward", "back"):
        return extrapolate_onestep(a, b, spec.mode, spec.coeff, spec.epsilon_floor)
    return extrapolate_twostep(a, b, spec.mode, spec.coeff, spec.epsilon_floor)


# ---------------------------------------------------------------------------
# archive I/O
# ---------------------------------------------------------------------------

def save_archive(params: ParamSet, path) -> None:
    """Write a parameter archive (float32 payload, CRC-32 protected)."""
    payload = b"".join(
        np.ascontiguousarray(a.astype("<f4", copy=False)).tobytes() for _, a in params.entries
    )
    parts = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.entries:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<4I", *arr.shape))
    parts.append(payload)
    parts.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    Path(path).write_bytes(b"".join(parts))


def load_archive(path) -> ParamSet:
    """Read a parameter archive written by :func:`save_archive`."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ArchiveTruncatedError(
                f"{path}: truncated while reading {what} "
                f"(need {n} bytes at offset {pos}, file has {len(raw)})"
            )
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    magic = take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise ArchiveVersionError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    manifest = []
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of entry {i}"))
        try:
            name = take(name_len, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveVersionError(f"{path}: entry {i} name is not UTF-8: {e}") from e
        shape = struct.unpack("<4I", take(16, f"shape of entry {i}"))
        manifest.append((name, shape))
    payload_len = sum(int(np.prod(s)) * 4 for _, s in manifest)
    payload = take(payload_len, "payload")
    (crc_stored,) = struct.unpack("<I", take(4, "checksum"))
    if pos != len(raw):
        raise ArchiveVersionError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ArchiveChecksumError(f"{path}: payload CRC mismatch")
    entries = []
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        entries.append((name, arr.astype(np.float32)))
        offset += n * 4
    return ParamSet(entries, meta={"format": 1})
