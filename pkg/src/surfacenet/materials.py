"""Material map sets and the tangent-space normal encoding shared by every module."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-5
MIN_NORMAL_Z = 1e-3


class MapKind(str, enum.Enum):
    DIFFUSE = "diffuse"
    NORMAL = "normal"
    ROUGHNESS = "roughness"
    SPECULAR = "specular"

    @property
    def channels(self) -> int:
        return 1 if self is MapKind.ROUGHNESS else 3


# Channel order used whenever the four maps are stacked into one tensor.
STACK_ORDER = (MapKind.NORMAL, MapKind.DIFFUSE, MapKind.ROUGHNESS, MapKind.SPECULAR)
STACK_CHANNELS = sum(k.channels for k in STACK_ORDER)


class DegenerateNormalWarning(UserWarning):
    pass


class MaterialError(ValueError):
    pass


def encode_normal(n) -> np.ndarray:
    """Map unit tangent-space normals (..., 3) to [0, 1] storage values.

    Raises:
        MaterialError: if any vector is not unit length or has z <= 0.
    """
    n = np.asarray(n, dtype=np.float64)
    if n.shape[-1] != 3:
        raise MaterialError(f"normal must have 3 components, got shape {n.shape}")
    norm = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise MaterialError(f"normal is not unit length (max |n|-1 = {np.max(np.abs(norm - 1.0)):.3g})")
    if np.any(n[..., 2] <= 0.0):
        raise MaterialError("normal must point away from the surface (z > 0)")
    return (n + 1.0) / 2.0


def decode_normal(e) -> np.ndarray:
    """Inverse of :func:`encode_normal` with renormalization.

    Decoded z is clamped to at least 1e-3 before normalizing, so a vector that
    decodes to zero comes back as the flat normal (0, 0, 1). Such pixels are
    reported through a :class:`DegenerateNormalWarning`.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != 3:
        raise MaterialError(f"encoded normal must have 3 components, got shape {e.shape}")
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise MaterialError("encoded normal components must lie in [0, 1]")
    n = 2.0 * e - 1.0
    degenerate = np.linalg.norm(n, axis=-1) < 1e-6
    if np.any(degenerate):
        warnings.warn(
            f"{int(np.count_nonzero(degenerate))} degenerate normal(s) replaced by (0, 0, 1)",
            DegenerateNormalWarning,
            stacklevel=2,
        )
    n[..., 2] = np.maximum(n[..., 2], MIN_NORMAL_Z)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass(frozen=True)
class MaterialMaps:
    """Four SVBRDF maps on a common H x W grid, all stored in [0, 1].

    ``normal`` holds encoded tangent-space normals; use :meth:`normals` for the
    decoded unit vectors. ``roughness`` is H x W x 1, the others H x W x 3.
    """

    diffuse: np.ndarray
    normal: np.ndarray
    roughness: np.ndarray
    specular: np.ndarray

    def __post_init__(self):
        for kind in MapKind:
            arr = np.asarray(getattr(self, kind.value), dtype=np.float64)
            if arr.ndim == 2 and kind is MapKind.ROUGHNESS:
                arr = arr[..., None]
            object.__setattr__(self, kind.value, arr)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.diffuse.shape[:2]

    def __getitem__(self, kind: MapKind | str) -> np.ndarray:
        return getattr(self, MapKind(kind).value)

    def normals(self) -> np.ndarray:
        return decode_normal(np.clip(self.normal, 0.0, 1.0))

    def stack(self) -> np.ndarray:
        """H x W x 10 array in :data:`STACK_ORDER`."""
        return np.concatenate([self[k] for k in STACK_ORDER], axis=-1)

    @classmethod
    def from_stack(cls, stacked: np.ndarray) -> MaterialMaps:
        parts, start = {}, 0
        for k in STACK_ORDER:
            parts[k.value] = stacked[..., start:start + k.channels]
            start += k.channels
        return cls(**parts)

    @classmethod
    def uniform(cls, resolution, diffuse=0.5, specular=0.04, roughness=0.5, normal=(0.0, 0.0, 1.0)) -> MaterialMaps:
        h, w = resolution
        enc = encode_normal(np.asarray(normal, dtype=np.float64))
        return cls(
            diffuse=np.broadcast_to(np.asarray(diffuse, dtype=np.float64), (h, w, 3)).copy(),
            normal=np.broadcast_to(enc, (h, w, 3)).copy(),
            roughness=np.full((h, w, 1), float(roughness)),
            specular=np.broadcast_to(np.asarray(specular, dtype=np.float64), (h, w, 3)).copy(),
        )


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "ok" if self.ok else "; ".join(self.problems)


def validate_maps(m: MaterialMaps, normal_tol: float = 2e-2) -> ValidationReport:
    """Check shapes, value ranges and normal lengths of a map set.

    ``normal_tol`` bounds | |2e - 1| - 1 | for stored normals; the default leaves
    room for 8-bit quantization.
    """
    report = ValidationReport()
    res = m.diffuse.shape[:2]
    for kind in MapKind:
        arr = m[kind]
        expected = (*res, kind.channels)
        if arr.shape != expected:
            report.problems.append(f"{kind.value}: shape {arr.shape}, expected {expected}")
            continue
        if not np.all(np.isfinite(arr)):
            report.problems.append(f"{kind.value}: non-finite values")
            continue
        bad = np.argwhere((arr < 0.0) | (arr > 1.0))
        if len(bad):
            y, x, c = bad[0]
            report.problems.append(
                f"{kind.value}: {len(bad)} value(s) outside [0, 1], first at (y={y}, x={x}, c={c}) = {arr[y, x, c]:.4g}"
            )
    if m.normal.shape == (*res, 3) and np.all(np.isfinite(m.normal)):
        n = 2.0 * m.normal - 1.0
        dev = np.abs(np.linalg.norm(n, axis=-1) - 1.0)
        if np.any(dev > normal_tol):
            y, x = np.unravel_index(np.argmax(dev), dev.shape)
            report.problems.append(f"normal: non-unit vectors, worst at (y={y}, x={x}) with | |n|-1 | = {dev[y, x]:.4g}")
        if np.any(n[..., 2] <= 0.0):
            report.problems.append(f"normal: {int(np.count_nonzero(n[..., 2] <= 0.0))} vector(s) with z <= 0")
    return report
