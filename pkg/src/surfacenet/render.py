"""Cook-Torrance / GGX forward renderer for planar material samples.

The sample occupies the square [-1, 1]^2 on the z = 0 plane, image row 0 at
y = +1. Flash mode puts a point light and the camera at the same position;
environment mode lights the plane with a list of directional samples and
views it orthographically from straight above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .materials import MaterialMaps

GAMMA = 2.2
MIN_ALPHA = 1e-3
MIN_SPEC_DENOM = 1e-6
DEFAULT_FLASH_INTENSITY = 3.0

# Evaluation flash positions: quadrant centres plus the centre, one unit above the plane.
FIVE_FLASH_POSITIONS = {
    "top_left": (-0.5, 0.5, 1.0),
    "top_right": (0.5, 0.5, 1.0),
    "bottom_left": (-0.5, -0.5, 1.0),
    "bottom_right": (0.5, -0.5, 1.0),
    "center": (0.0, 0.0, 1.0),
}


class RenderError(ValueError):
    pass


def ggx_distribution(roughness, cos_theta_h):
    """GGX normal distribution with alpha = roughness^2 (floored at 1e-3)."""
    r = np.asarray(roughness, dtype=np.float64)
    c = np.asarray(cos_theta_h, dtype=np.float64)
    a2 = np.maximum(r * r, MIN_ALPHA) ** 2
    t = c * c * (a2 - 1.0) + 1.0
    return a2 / (math.pi * t * t)


def smith_geometry(roughness, cos_theta_l, cos_theta_v):
    """Separable Smith-GGX shadowing-masking with k = alpha^2 / 2."""
    r = np.asarray(roughness, dtype=np.float64)
    k = (r * r) ** 2 / 2.0

    def g1(c):
        c = np.asarray(c, dtype=np.float64)
        return c / (c * (1.0 - k) + k)

    return g1(cos_theta_l) * g1(cos_theta_v)


def fresnel_schlick(f0, cos_theta_d):
    f0 = np.asarray(f0, dtype=np.float64)
    c = np.asarray(cos_theta_d, dtype=np.float64)
    return f0 + (1.0 - f0) * (1.0 - c) ** 5


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def shade_pixel(diffuse, specular, roughness, normal, light_dir, view_dir, light_radiance):
    """Reflected radiance for one light direction.

    All arguments broadcast against each other; vector arguments carry a
    trailing axis of 3 and ``roughness`` a trailing axis of 1. ``normal`` is a
    decoded unit normal. Back-facing configurations (n.l <= 0 or n.v <= 0)
    contribute zero.

    Returns:
        Linear RGB radiance, shape broadcast(...) x 3.
    """
    args = [np.asarray(a, dtype=np.float64) for a in (diffuse, specular, roughness, normal, light_dir, view_dir, light_radiance)]
    if any(np.isnan(a).any() for a in args):
        raise RenderError("NaN in shading inputs")
    diffuse, specular, roughness, n, l, v, radiance = args
    if roughness.ndim == 0:
        roughness = roughness[None]

    n_l = _dot(n, l)
    n_v = _dot(n, v)
    h = _normalize(l + v)
    n_h = np.clip(_dot(n, h), 0.0, 1.0)
    v_h = np.clip(_dot(v, h), 0.0, 1.0)

    d = ggx_distribution(roughness, n_h)
    f = fresnel_schlick(specular, v_h)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = smith_geometry(roughness, np.clip(n_l, 0.0, 1.0), np.clip(n_v, 0.0, 1.0))
    g = np.nan_to_num(g, nan=0.0)
    spec = d * f * g / np.maximum(4.0 * n_l * n_v, MIN_SPEC_DENOM)
    out = (diffuse / math.pi + spec) * n_l * radiance
    out = np.where((n_l > 0.0) & (n_v > 0.0), out, 0.0)
    if not np.all(np.isfinite(out)):
        raise RenderError("non-finite shading result")
    return out


def tonemap(linear) -> np.ndarray:
    return np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0) ** (1.0 / GAMMA)


@dataclass(frozen=True)
class RenderedImage:
    """Linear radiance image (H x W x 3, non-negative) and its display version."""

    pixels: np.ndarray

    @property
    def tone_mapped(self) -> np.ndarray:
        return tonemap(self.pixels)

    @classmethod
    def from_tone_mapped(cls, display: np.ndarray) -> RenderedImage:
        return cls(np.clip(np.asarray(display, dtype=np.float64), 0.0, 1.0) ** GAMMA)


@dataclass(frozen=True)
class LightSetup:
    mode: str = "flash"
    flash_position: tuple[float, float, float] = (0.0, 0.0, 1.0)
    flash_intensity: float = DEFAULT_FLASH_INTENSITY
    directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radiance: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if self.mode == "flash":
            if len(self.flash_position) != 3:
                raise RenderError("flash_position must be a 3-vector")
            if self.flash_position[2] <= 0.0:
                raise RenderError(f"flash must be above the plane, got z = {self.flash_position[2]}")
        elif self.mode == "environment":
            d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
            r = np.atleast_2d(np.asarray(self.radiance, dtype=np.float64))
            object.__setattr__(self, "directions", d)
            object.__setattr__(self, "radiance", r)
            if d.shape[0] == 0 or d.shape != r.shape or d.shape[1] != 3:
                raise RenderError(f"environment needs N >= 1 matching (direction, radiance) rows, got {d.shape} / {r.shape}")
            if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-5):
                raise RenderError("environment directions must be unit vectors")
            if np.any(d[:, 2] <= 0.0):
                raise RenderError("environment directions must lie in the upper hemisphere (z > 0)")
        else:
            raise RenderError(f"unknown light mode {self.mode!r}")

    @property
    def sample_count(self) -> int:
        return 1 if self.mode == "flash" else len(self.directions)

    @classmethod
    def flash(cls, position=(0.0, 0.0, 1.0), intensity=DEFAULT_FLASH_INTENSITY) -> LightSetup:
        return cls(mode="flash", flash_position=tuple(float(p) for p in position), flash_intensity=float(intensity))

    @classmethod
    def environment(cls, directions, radiance) -> LightSetup:
        return cls(mode="environment", directions=directions, radiance=radiance)


def pixel_positions(resolution) -> np.ndarray:
    """Surface positions (H x W x 3) of pixel centres on the z = 0 plane."""
    h, w = resolution
    xs = -1.0 + (2.0 * np.arange(w) + 1.0) / w
    ys = 1.0 - (2.0 * np.arange(h) + 1.0) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.zeros_like(gx)], axis=-1)


def render_flash(maps: MaterialMaps, setup: LightSetup) -> RenderedImage:
    if setup.mode != "flash":
        raise RenderError("render_flash needs a flash light setup")
    p = pixel_positions(maps.resolution)
    to_light = np.asarray(setup.flash_position, dtype=np.float64) - p
    dist2 = _dot(to_light, to_light)
    l = to_light / np.sqrt(dist2)
    radiance = setup.flash_intensity / dist2
    out = shade_pixel(maps.diffuse, maps.specular, maps.roughness, maps.normals(), l, l, radiance)
    return RenderedImage(out)


def render_environment(maps: MaterialMaps, setup: LightSetup) -> RenderedImage:
    if setup.mode != "environment":
        raise RenderError("render_environment needs an environment light setup")
    n = maps.normals()
    v = np.array([0.0, 0.0, 1.0])
    out = np.zeros((*maps.resolution, 3))
    for d, rad in zip(setup.directions, setup.radiance):
        out += shade_pixel(maps.diffuse, maps.specular, maps.roughness, n, d, v, rad)
    return RenderedImage(out)


def render(maps: MaterialMaps, setup: LightSetup) -> RenderedImage:
    if setup.mode == "flash":
        return render_flash(maps, setup)
    return render_environment(maps, setup)


def render_five(maps: MaterialMaps, intensity: float = DEFAULT_FLASH_INTENSITY) -> dict[str, RenderedImage]:
    return {name: render_flash(maps, LightSetup.flash(pos, intensity)) for name, pos in FIVE_FLASH_POSITIONS.items()}


def cosine_hemisphere(count: int, seed: int = 0, total_radiance=(1.0, 1.0, 1.0)) -> LightSetup:
    """Cosine-weighted sky samples whose sum estimates a uniform sky of the given radiance."""
    rng = np.random.default_rng(seed)
    u1, u2 = rng.random(count), rng.random(count)
    r, phi = np.sqrt(u1), 2.0 * math.pi * u2
    z = np.sqrt(np.maximum(1.0 - u1, 1e-6))
    d = _normalize(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1))
    # pdf = cos / pi, and shading multiplies by cos again
    weight = math.pi / (count * d[:, 2:3])
    return LightSetup.environment(d, weight * np.asarray(total_radiance, dtype=np.float64))


def random_environment(seed: int, count: int = 32, min_elevation_z: float = 0.1) -> LightSetup:
    """Seeded natural-looking illumination: a tinted sky plus one dominant sun."""
    rng = np.random.default_rng(seed)
    sky_tint = 0.6 + 0.4 * rng.random(3)
    sky = cosine_hemisphere(count - 1, seed=seed + 1, total_radiance=0.5 * sky_tint)
    sun_z = rng.uniform(min_elevation_z + 0.2, 0.95)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    s = math.sqrt(1.0 - sun_z * sun_z)
    sun_dir = np.array([[s * math.cos(phi), s * math.sin(phi), sun_z]])
    sun_rad = (1.0 + 1.5 * rng.random()) * (0.8 + 0.2 * rng.random((1, 3)))
    return LightSetup.environment(np.vstack([sky.directions, sun_dir]), np.vstack([sky.radiance, sun_rad]))


def load_environment(path) -> LightSetup:
    """Read "dx dy dz r g b" lines (blank lines and '#' comments ignored)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise RenderError(f"{path}:{lineno}: expected 6 numbers, got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise RenderError(f"{path}: no environment samples")
    arr = np.asarray(rows)
    return LightSetup.environment(_normalize(arr[:, :3]), arr[:, 3:])


def save_environment(setup: LightSetup, path) -> None:
    lines = [" ".join(f"{x:.9g}" for x in (*d, *r)) for d, r in zip(setup.directions, setup.radiance)]
    Path(path).write_text("\n".join(lines) + "\n")
