"""Seeded procedural SVBRDF synthesis.

Lattice randomness comes from a 32-bit integer hash, so the noise fields are
bit-identical across platforms; only IEEE-exact arithmetic (+, *, /, sqrt) is
applied on top of the hashed values.
"""

from __future__ import annotations

import numpy as np

from .materials import MaterialMaps

PATTERNS = ("checker", "bricks", "perlin", "voronoi", "stripes")

_M1 = np.uint32(0x7FEB352D)
_M2 = np.uint32(0x846CA68B)
_PX = np.uint32(0x8DA6B343)
_PY = np.uint32(0xD8163841)
_PS = np.uint32(0xCB1AB31F)
_INV32 = 1.0 / 4294967296.0
_R = 0.7071067811865476
_GRADIENTS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [_R, _R], [-_R, _R], [_R, -_R], [-_R, -_R]])


def hash2(ix, iy, seed: int) -> np.ndarray:
    """lowbias32 of a mixed (x, y, seed) triple, computed in wrapping uint32."""
    ix = np.asarray(ix, dtype=np.int64).astype(np.uint32)
    iy = np.asarray(iy, dtype=np.int64).astype(np.uint32)
    s = np.asarray(seed & 0xFFFFFFFF, dtype=np.uint32)
    with np.errstate(over="ignore"):
        h = (ix * _PX) ^ (iy * _PY) ^ (s * _PS)
        h = h ^ (h >> np.uint32(16))
        h = h * _M1
        h = h ^ (h >> np.uint32(15))
        h = h * _M2
        h = h ^ (h >> np.uint32(16))
    return h


def hash_unit(ix, iy, seed: int) -> np.ndarray:
    """Hash mapped to [0, 1)."""
    return hash2(ix, iy, seed).astype(np.float64) * _INV32


def _grid(resolution: int, freq: float):
    u = (np.arange(resolution) + 0.5) / resolution * freq
    return np.meshgrid(u, u)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def perlin(resolution: int, freq: int, seed: int) -> np.ndarray:
    """Tileable gradient noise with ``freq`` lattice cells across, roughly in [-1, 1]."""
    x, y = _grid(resolution, freq)
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0

    def corner(dx, dy):
        g = _GRADIENTS[hash2((x0 + dx) % freq, (y0 + dy) % freq, seed) & np.uint32(7)]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(1, 0) - corner(0, 0))
    bottom = corner(0, 1) + u * (corner(1, 1) - corner(0, 1))
    return (top + v * (bottom - top)) * 1.41421356


def fbm(resolution: int, base_freq: int, seed: int, octaves: int = 4, gain: float = 0.5) -> np.ndarray:
    """Fractal sum of :func:`perlin` octaves rescaled to [0, 1]."""
    out = np.zeros((resolution, resolution))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        out += amp * perlin(resolution, base_freq << o, seed + 7919 * o)
        total += amp
        amp *= gain
    return np.clip(0.5 + 0.5 * out / total, 0.0, 1.0)


def worley(resolution: int, freq: int, seed: int):
    """Tileable cellular noise.

    Returns:
        (f1, f2, cell_id): distances to the nearest and second-nearest feature
        points in cell units, and a per-pixel hash of the owning cell.
    """
    x, y = _grid(resolution, freq)
    cx, cy = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    f1 = np.full(x.shape, np.inf)
    f2 = np.full(x.shape, np.inf)
    owner = np.zeros(x.shape, dtype=np.uint32)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            nx, ny = (cx + dx) % freq, (cy + dy) % freq
            px = cx + dx + hash_unit(nx, ny, seed)
            py = cy + dy + hash_unit(nx, ny, seed ^ 0x5BD1E995)
            d = np.sqrt((x - px) ** 2 + (y - py) ** 2)
            closer = d < f1
            f2 = np.where(closer, f1, np.minimum(f2, d))
            f1 = np.where(closer, d, f1)
            owner = np.where(closer, hash2(nx, ny, seed ^ 0x27D4EB2F), owner)
    return f1, f2, owner


def _tri(x):
    """Unit-period triangle wave in [0, 1]."""
    f = x - np.floor(x)
    return 1.0 - np.abs(2.0 * f - 1.0)


def height_to_normals(height: np.ndarray, strength: float) -> np.ndarray:
    """Encoded normal map from a periodic height field (height in image units)."""
    res = height.shape[0]
    # x grows with column index; world y grows toward row 0
    dhdx = (np.roll(height, -1, axis=1) - np.roll(height, 1, axis=1)) * (res / 4.0)
    dhdy = (np.roll(height, 1, axis=0) - np.roll(height, -1, axis=0)) * (res / 4.0)
    n = np.stack([-strength * dhdx, -strength * dhdy, np.ones_like(height)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return (n + 1.0) / 2.0


def _pattern_fields(pattern: str, res: int, seed: int, rng: np.random.Generator):
    """Region mask in [0, 1], relief height, and per-region variation in [0, 1]."""
    if pattern == "checker":
        cells = int(rng.choice([4, 8]))
        x, y = _grid(res, cells)
        mask = ((np.floor(x) + np.floor(y)) % 2).astype(np.float64)
        height = 0.15 * mask
        variation = np.zeros_like(mask)
    elif pattern == "stripes":
        count = int(rng.choice([3, 4, 6, 8]))
        x, y = _grid(res, count)
        coord = x if rng.random() < 0.5 else y
        wave = _tri(coord)
        mask = _smoothstep(0.4, 0.6, wave)
        height = 0.2 * wave
        variation = np.zeros_like(mask)
    elif pattern == "perlin":
        freq = int(rng.choice([2, 4]))
        n = fbm(res, freq, seed + 101, octaves=5)
        threshold = 0.4 + 0.2 * rng.random()
        mask = _smoothstep(threshold - 0.06, threshold + 0.06, n)
        height = n
        variation = fbm(res, freq * 2, seed + 202, octaves=3)
    elif pattern == "voronoi":
        freq = int(rng.choice([4, 6, 8]))
        f1, f2, owner = worley(res, freq, seed + 303)
        crack = 1.0 - _smoothstep(0.03, 0.12, f2 - f1)
        mask = 1.0 - crack
        height = mask * (1.0 - 0.5 * f1)
        variation = owner.astype(np.float64) * _INV32 * mask
    elif pattern == "bricks":
        rows = int(rng.choice([4, 8]))
        cols = rows // 2
        mortar = 0.04 + 0.04 * rng.random()
        u = (np.arange(res) + 0.5) / res
        bx, by = np.meshgrid(u * cols, u * rows)
        row = np.floor(by).astype(np.int64)
        bx = bx + 0.5 * (row % 2)
        col = np.floor(bx).astype(np.int64) % cols
        fx, fy = bx - np.floor(bx), by - np.floor(by)
        edge = np.minimum(np.minimum(fx, 1.0 - fx) * 2.0 * rows / cols, np.minimum(fy, 1.0 - fy))
        mask = _smoothstep(mortar * 0.5, mortar * 1.5, edge)
        brick_id = hash_unit(col, row, seed + 404)
        height = 0.35 * mask
        variation = brick_id * mask
    else:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    return mask, height, variation


def generate_procedural(seed: int, pattern: str, resolution: int, noise_overlay: bool = True) -> MaterialMaps:
    """Build one material sample.

    ``mask`` separates two material regions (e.g. brick vs mortar); region 0
    is recessed, flat and rough. With ``noise_overlay=False`` no per-pixel
    detail noise or per-region colour variation is added, which leaves the
    checker and stripes diffuse maps as pure two-tone images.

    Raises:
        ValueError: unknown pattern, or resolution not a power of two >= 32.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if resolution < 32 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 32, got {resolution}")

    rng = np.random.default_rng([seed, PATTERNS.index(pattern)])
    mask, height, variation = _pattern_fields(pattern, resolution, seed, rng)
    m = mask[..., None]

    base = rng.uniform(0.05, 0.85, size=(2, 3))
    base[0] *= 0.6  # recessed region is darker
    diffuse = base[0] + (base[1] - base[0]) * m

    rough_lo, rough_hi = sorted(rng.uniform(0.15, 0.95, size=2))
    roughness = rough_hi + (rough_lo - rough_hi) * m

    metallic = rng.random() < 0.25
    if metallic:
        spec_top = base[1] * 0.6 + 0.35
        diffuse = diffuse * (1.0 - 0.7 * m)
    else:
        spec_top = np.full(3, rng.uniform(0.03, 0.12))
    spec_low = np.full(3, rng.uniform(0.02, 0.05))
    specular = spec_low + (spec_top - spec_low) * m

    strength = rng.uniform(0.6, 1.6)
    if noise_overlay:
        detail = fbm(resolution, 8, seed + 505, octaves=3)
        height = height + 0.06 * (detail - 0.5) * mask
        tint = 1.0 + 0.35 * (variation[..., None] - 0.5)
        grain = 1.0 + 0.25 * (fbm(resolution, 16, seed + 606, octaves=2)[..., None] - 0.5)
        diffuse = diffuse * tint * grain
        roughness = roughness + 0.08 * (detail[..., None] - 0.5)

    normal = height_to_normals(height, strength)
    return MaterialMaps(
        diffuse=np.clip(diffuse, 0.0, 1.0),
        normal=np.clip(normal, 0.0, 1.0),
        roughness=np.clip(roughness, 0.02, 1.0),
        specular=np.clip(specular, 0.0, 1.0),
    )
