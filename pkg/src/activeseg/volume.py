"""3D scalar and label volumes with physical spacing.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x, ``j`` along y and
``k`` along z. Flat (file / voxel-index) order is x-fastest, z-slowest, i.e.
numpy Fortran order on the ``(nx, ny, nz)`` array.

The physical position of voxel ``(i, j, k)`` is its center
``((i + 0.5) * dx, (j + 0.5) * dy, (k + 0.5) * dz)``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, ParseError


@dataclass(frozen=True)
class Spacing:
    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgumentError(f"spacing {name} must be positive, got {value!r}")
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dz", float(self.dz))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @classmethod
    def of(cls, value) -> "Spacing":
        if isinstance(value, Spacing):
            return value
        dx, dy, dz = value
        return cls(dx, dy, dz)


def _check_3d(data: np.ndarray):
    if data.ndim != 3 or min(data.shape) < 1:
        raise InvalidArgumentError(f"volume data must be a nonempty 3D array, got shape {data.shape}")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued 3D grid (image intensities, probabilities, entropies)."""

    data: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        _check_3d(data)
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Binary 3D mask: 0 = background, 1 = foreground."""

    data: np.ndarray
    spacing: Spacing = field(default_factory=lambda: Spacing(1.0, 1.0, 1.0))

    def __post_init__(self):
        raw = np.asarray(self.data)
        _check_3d(raw)
        if raw.dtype == bool:
            data = raw.astype(np.uint8)
        else:
            if not np.all((raw == 0) | (raw == 1)):
                bad = np.unique(raw[(raw != 0) & (raw != 1)])[:5]
                raise InvalidArgumentError(f"label volume must be binary, found values {bad.tolist()}")
            data = raw.astype(np.uint8)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


def volumes_equal(a, b) -> bool:
    """Exact equality of type, dims, spacing and data."""
    return (
        type(a) is type(b)
        and a.dims == b.dims
        and a.spacing == b.spacing
        and np.array_equal(a.data, b.data)
    )


# ---------------------------------------------------------------------------
# resampling


def _output_dims(dims, spacing: Spacing, target: Spacing) -> tuple[int, int, int]:
    out = []
    for n, s_in, s_out in zip(dims, spacing.as_tuple(), target.as_tuple()):
        out.append(max(1, int(math.floor(n * s_in / s_out + 0.5))))
    return tuple(out)


def _centers_in_input(n_out: int, s_in: float, s_out: float) -> np.ndarray:
    # output voxel centers expressed as continuous input positions (mm / s_in)
    return (np.arange(n_out) + 0.5) * s_out / s_in


def _linear_axis(arr: np.ndarray, axis: int, n_out: int, s_in: float, s_out: float) -> np.ndarray:
    n_in = arr.shape[axis]
    if s_in == s_out and n_in == n_out:
        return arr.copy()
    c = np.clip(_centers_in_input(n_out, s_in, s_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = c - i0
    shape = [1, 1, 1]
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    # a + f*(b - a) reproduces constants exactly
    return a + frac * (b - a)


def _nearest_axis(arr: np.ndarray, axis: int, n_out: int, s_in: float, s_out: float) -> np.ndarray:
    n_in = arr.shape[axis]
    if s_in == s_out and n_in == n_out:
        return arr.copy()
    # nearest input center to position u (in input voxel units) is floor(u); halves round up
    idx = np.clip(np.floor(_centers_in_input(n_out, s_in, s_out)).astype(np.intp), 0, n_in - 1)
    return np.take(arr, idx, axis=axis)


def resample_trilinear(v: ScalarVolume, target) -> ScalarVolume:
    """Trilinear resampling to ``target`` spacing.

    Output dims are ``round(extent / target)`` per axis (half up, at least 1).
    Samples falling outside the outermost input voxel centers clamp to the
    edge voxel.
    """
    target = Spacing.of(target)
    out_dims = _output_dims(v.dims, v.spacing, target)
    data = v.data
    for axis in range(3):
        data = _linear_axis(data, axis, out_dims[axis], v.spacing.as_tuple()[axis], target.as_tuple()[axis])
    return ScalarVolume(data, target)


def resample_labels_nearest(v: LabelVolume, target) -> LabelVolume:
    target = Spacing.of(target)
    out_dims = _output_dims(v.dims, v.spacing, target)
    data = v.data
    for axis in range(3):
        data = _nearest_axis(data, axis, out_dims[axis], v.spacing.as_tuple()[axis], target.as_tuple()[axis])
    return LabelVolume(data, target)


# ---------------------------------------------------------------------------
# morphology and padding


def dilate(l: LabelVolume, kernel_radius=(5, 5, 5)) -> LabelVolume:
    """Binary dilation with an axis-aligned box of half-widths ``kernel_radius``.

    The default radius (5, 5, 5) is the 11x11x11 box. Voxels beyond the
    volume border count as background.
    """
    radius = tuple(int(r) for r in kernel_radius)
    if len(radius) != 3 or min(radius) < 0:
        raise InvalidArgumentError(f"kernel radius must be three non-negative ints, got {kernel_radius!r}")
    if radius == (0, 0, 0):
        return LabelVolume(l.data.copy(), l.spacing)
    size = tuple(2 * r + 1 for r in radius)
    out = ndimage.maximum_filter(l.data, size=size, mode="constant", cval=0)
    return LabelVolume(out, l.spacing)


def pad_reflect(v: ScalarVolume, pads) -> ScalarVolume:
    """Mirror padding without repeating the edge sample ([a,b,c] -> [b,a,b,c,b])."""
    pads = tuple(int(p) for p in pads)
    if len(pads) != 3 or min(pads) < 0:
        raise InvalidArgumentError(f"pads must be three non-negative ints, got {pads!r}")
    for p, n in zip(pads, v.dims):
        if p >= n:
            raise InvalidArgumentError(f"pad {p} must be smaller than the axis length {n}")
    out = np.pad(v.data, [(p, p) for p in pads], mode="reflect")
    return ScalarVolume(out, v.spacing)


# ---------------------------------------------------------------------------
# synthetic phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic abdominal-like phantom.

    Ranges are inclusive ``(low, high)`` pairs. Semi-axes and radii are in
    voxels. ``intensity_means`` and ``intensity_sds`` are ordered
    (background, organ, lesion).
    """

    dims: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    organ_count: tuple[int, int] = (1, 3)
    organ_semi_axes: tuple = ((8.0, 18.0), (8.0, 18.0), (5.0, 13.0))
    lesion_count: tuple[int, int] = (0, 3)
    lesion_radius: tuple[float, float] = (2.0, 5.0)
    intensity_means: tuple[float, float, float] = (40.0, 110.0, 70.0)
    intensity_sds: tuple[float, float, float] = (15.0, 15.0, 15.0)
    smoothing_sigma: float = 1.0
    # SD of a per-volume offset added to every intensity (site/scanner variation)
    intensity_jitter: float = 0.0

    def validate(self):
        dims = tuple(self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidArgumentError(f"phantom dims must be three positive ints, got {dims!r}")
        Spacing.of(self.spacing)
        lo, hi = self.organ_count
        if not 1 <= lo <= hi:
            raise InvalidArgumentError("organ_count must satisfy 1 <= low <= high")
        if len(self.organ_semi_axes) != 3:
            raise InvalidArgumentError("organ_semi_axes needs one range per axis")
        for axis, ((a_lo, a_hi), n) in enumerate(zip(self.organ_semi_axes, dims)):
            if not 1 <= a_lo <= a_hi:
                raise InvalidArgumentError(f"semi-axis range on axis {axis} must satisfy 1 <= low <= high")
            # center range [a + 2, n - 1 - a - 2] must be nonempty
            if n - 1 - 2 * (a_hi + 2) < 0:
                raise InvalidArgumentError(
                    f"organ with semi-axis {a_hi} does not fit axis {axis} of length {n} with a 2-voxel margin"
                )
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise InvalidArgumentError("lesion_count must satisfy 0 <= low <= high")
        r_lo, r_hi = self.lesion_radius
        if not 0 < r_lo <= r_hi:
            raise InvalidArgumentError("lesion_radius must satisfy 0 < low <= high")
        if len(self.intensity_means) != 3 or len(self.intensity_sds) != 3:
            raise InvalidArgumentError("intensity means/sds need three entries")
        if min(self.intensity_sds) < 0 or self.smoothing_sigma < 0 or self.intensity_jitter < 0:
            raise InvalidArgumentError("standard deviations, jitter and smoothing sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "organ_count": list(self.organ_count),
            "organ_semi_axes": [list(r) for r in self.organ_semi_axes],
            "lesion_count": list(self.lesion_count),
            "lesion_radius": list(self.lesion_radius),
            "intensity_means": list(self.intensity_means),
            "intensity_sds": list(self.intensity_sds),
            "smoothing_sigma": self.smoothing_sigma,
            "intensity_jitter": self.intensity_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        base = cls()
        kw = {}
        for key in base.to_dict():
            if key not in d:
                continue
            value = d[key]
            if key == "organ_semi_axes":
                value = tuple(tuple(float(x) for x in r) for r in value)
            elif key in ("smoothing_sigma", "intensity_jitter"):
                value = float(value)
            else:
                value = tuple(value)
            kw[key] = value
        unknown = set(d) - set(base.to_dict())
        if unknown:
            raise InvalidArgumentError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**kw)


def ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    """Voxels whose index-space position satisfies the ellipsoid inequality."""
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return q <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[ScalarVolume, LabelVolume]:
    """Draw one phantom image and its organ label.

    Organ geometry is drawn before anything else so the label depends only on
    the organ parameters and the seed, never on the lesion settings.
    The image is rounded to float32 precision so it survives MET_FLOAT files.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    dims = tuple(int(n) for n in spec.dims)

    organ = np.zeros(dims, dtype=bool)
    n_organs = int(rng.integers(spec.organ_count[0], spec.organ_count[1] + 1))
    for _ in range(n_organs):
        axes = [rng.uniform(lo, hi) for lo, hi in spec.organ_semi_axes]
        center = [rng.uniform(a + 2, n - 1 - a - 2) for a, n in zip(axes, dims)]
        organ |= ellipsoid_mask(dims, center, axes)

    lesion = np.zeros(dims, dtype=bool)
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    organ_idx = np.flatnonzero(organ)
    for _ in range(n_lesions):
        radius = rng.uniform(*spec.lesion_radius)
        center = np.unravel_index(organ_idx[rng.integers(organ_idx.size)], dims)
        lesion |= ellipsoid_mask(dims, center, (radius, radius, radius))
    lesion &= organ

    region = organ.astype(np.intp) + lesion.astype(np.intp)  # 0 bg, 1 organ, 2 lesion
    means = np.asarray(spec.intensity_means, dtype=np.float64)[region]
    sds = np.asarray(spec.intensity_sds, dtype=np.float64)[region]
    offset = rng.normal(0.0, spec.intensity_jitter) if spec.intensity_jitter > 0 else 0.0
    image = means + offset + sds * rng.standard_normal(dims)
    if spec.smoothing_sigma > 0:
        image = ndimage.gaussian_filter(image, spec.smoothing_sigma, mode="mirror")
    image = image.astype(np.float32).astype(np.float64)

    spacing = Spacing.of(spec.spacing)
    return ScalarVolume(image, spacing), LabelVolume(organ, spacing)


# ---------------------------------------------------------------------------
# MetaImage files

_ELEMENT_TYPES = {
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
    "MET_UCHAR": np.dtype("u1"),
}


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_mhd(path, volume, element_type: str | None = None, detached: bool = False):
    """Write a MetaImage volume.

    ``element_type`` defaults to MET_UCHAR for labels and to MET_FLOAT for
    scalar volumes whose values are exactly float32-representable
    (MET_DOUBLE otherwise), so a write/read round trip is always bit-exact.
    With ``detached=True`` the payload goes to a sibling ``.raw`` file.
    """
    path = Path(path)
    if element_type is None:
        if isinstance(volume, LabelVolume):
            element_type = "MET_UCHAR"
        else:
            as32 = volume.data.astype(np.float32)
            lossless = np.array_equal(as32.astype(np.float64), volume.data)
            element_type = "MET_FLOAT" if lossless else "MET_DOUBLE"
    if element_type not in _ELEMENT_TYPES:
        raise InvalidArgumentError(f"unsupported element type {element_type}")
    dtype = _ELEMENT_TYPES[element_type]
    payload = np.ascontiguousarray(volume.data.ravel(order="F").astype(dtype)).tobytes()

    raw_name = path.with_suffix(".raw").name if detached else "LOCAL"
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            "BinaryDataByteOrderMSB = False",
            "DimSize = " + " ".join(str(n) for n in volume.dims),
            "ElementSpacing = " + " ".join(_fmt_float(s) for s in volume.spacing.as_tuple()),
            f"ElementType = {element_type}",
            f"ElementDataFile = {raw_name}",
        ]
    ) + "\n"
    if detached:
        _atomic_write(path.with_suffix(".raw"), payload)
        _atomic_write(path, header.encode("ascii"))
    else:
        _atomic_write(path, header.encode("ascii") + payload)


def _atomic_write(path: Path, content: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(content)
    os.replace(tmp, path)


def _parse_header(blob: bytes):
    fields = {}
    pos = 0
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ParseError("header ended without ElementDataFile", field="ElementDataFile")
        line = blob[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"malformed header line {line!r}", field=line)
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            return fields, pos


def read_mhd(path, as_label: bool | None = None):
    """Read a MetaImage volume.

    MET_UCHAR files load as :class:`LabelVolume` and float files as
    :class:`ScalarVolume` unless ``as_label`` forces one or the other.
    """
    path = Path(path)
    blob = path.read_bytes()
    fields, offset = _parse_header(blob)

    def need(key):
        if key not in fields:
            raise ParseError(f"missing header field {key}", field=key)
        return fields[key]

    if need("ObjectType") != "Image":
        raise ParseError(f"ObjectType must be Image, got {fields['ObjectType']}", field="ObjectType")
    if need("NDims") != "3":
        raise ParseError(f"NDims must be 3, got {fields['NDims']}", field="NDims")
    if fields.get("BinaryDataByteOrderMSB", "False") not in ("False", "false", "0"):
        raise ParseError("big-endian payloads are not supported", field="BinaryDataByteOrderMSB")
    try:
        dims = tuple(int(t) for t in need("DimSize").split())
    except ValueError:
        raise ParseError(f"DimSize is not a list of integers: {fields['DimSize']!r}", field="DimSize") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ParseError(f"DimSize must hold three positive integers, got {fields['DimSize']!r}", field="DimSize")
    try:
        spacing_values = tuple(float(t) for t in fields.get("ElementSpacing", "1 1 1").split())
        if len(spacing_values) != 3:
            raise ValueError
        spacing = Spacing.of(spacing_values)
    except (ValueError, InvalidArgumentError):
        raise ParseError(f"invalid ElementSpacing {fields.get('ElementSpacing')!r}", field="ElementSpacing") from None
    etype = need("ElementType")
    if etype not in _ELEMENT_TYPES:
        raise ParseError(f"unsupported ElementType {etype}", field="ElementType")
    dtype = _ELEMENT_TYPES[etype]

    data_file = need("ElementDataFile")
    if data_file == "LOCAL":
        payload = blob[offset:]
    else:
        payload = (path.parent / data_file).read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise ParseError(
            f"payload has {len(payload)} bytes but DimSize {dims} with {etype} needs {expected}",
            field="DimSize",
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(dims, order="F")

    if as_label is None:
        as_label = etype == "MET_UCHAR"
    if as_label:
        if not np.all((data == 0) | (data == 1)):
            raise ParseError(f"label file {path.name} contains values other than 0 and 1", field="ElementType")
        return LabelVolume(data.astype(np.uint8), spacing)
    if not np.all(np.isfinite(data)):
        raise ParseError(f"{path.name} contains non-finite values", field="ElementType")
    return ScalarVolume(data.astype(np.float64), spacing)
