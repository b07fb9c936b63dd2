"""Cartesian sampling, MRI encoding operators, coil maps, phantoms and noise.

Conventions
-----------
* Images are complex (H, W); batched images are (N, H, W).
* k-space always carries a coil axis: (C, H, W), batched (N, C, H, W).
* Mask line indices are stored in the *centered* layout (DC at column W//2),
  the way masks are usually drawn.  :meth:`SamplingMask.columns` converts to
  the native FFT layout (DC at column 0) used by the operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dunmri import fft as _fft
from dunmri.tensor import Tensor, as_tensor, fft2, ifft2, make_op, mask_multiply, reshape

CENTER_FRACTION = 0.32
ACCELERATIONS = (1, 4, 8, 12)
PATTERNS = ("equispaced", "random")


# -------------------------------------------------------------------- masks


def center_count_for(budget: int, fraction: float = CENTER_FRACTION) -> int:
    """Even-rounded share of the line budget given to the low frequencies (min 2)."""
    return max(2, 2 * int(round(fraction * budget / 2.0)))


@dataclass(frozen=True)
class SamplingMask:
    width: int
    acceleration: int
    pattern: str
    seed: int
    center_count: int
    line_set: tuple[int, ...]

    def __post_init__(self):
        if list(self.line_set) != sorted(set(self.line_set)):
            raise ValueError("line_set must be sorted and unique")
        if self.line_set and not (0 <= self.line_set[0] and self.line_set[-1] < self.width):
            raise ValueError("line_set entries out of range")

    def __len__(self) -> int:
        return len(self.line_set)

    @property
    def center_lines(self) -> tuple[int, ...]:
        lo = self.width // 2 - self.center_count // 2
        return tuple(range(lo, lo + self.center_count))

    def centered(self) -> np.ndarray:
        m = np.zeros(self.width, dtype=bool)
        m[list(self.line_set)] = True
        return m

    def columns(self) -> np.ndarray:
        """Boolean column pattern in native FFT order (DC at index 0)."""
        return np.fft.ifftshift(self.centered())

    def as_array(self, height: int) -> np.ndarray:
        return np.broadcast_to(self.columns(), (height, self.width))

    def apply(self, k: np.ndarray) -> np.ndarray:
        return np.where(self.columns(), k, 0)

    def with_lines(self, lines) -> "SamplingMask":
        """A mask sharing this one's metadata but sampling only ``lines``."""
        return SamplingMask(self.width, self.acceleration, self.pattern, self.seed,
                            self.center_count, tuple(sorted(int(i) for i in lines)))

    def to_text(self) -> str:
        head = f"{self.width} {self.acceleration} {self.pattern} {self.seed}"
        return head + "\n" + ",".join(str(i) for i in self.line_set) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SamplingMask":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        width, accel, pattern, seed = lines[0].split()
        rebuilt = make_mask(int(width), int(accel), pattern, int(seed))
        listed = tuple(int(v) for v in lines[1].split(",")) if len(lines) > 1 and lines[1] else ()
        if listed != rebuilt.line_set:
            return rebuilt.with_lines(listed)
        return rebuilt


def make_mask(width: int, acceleration: int, pattern: str = "random", seed: int = 0,
              center_fraction: float = CENTER_FRACTION) -> SamplingMask:
    """Phase-encode line mask: a contiguous low-frequency block plus the rest
    of the budget placed equispaced or uniformly at random."""
    if not _fft.is_power_of_two(width):
        raise ValueError(f"width must be a power of two, got {width}")
    if acceleration not in ACCELERATIONS:
        raise ValueError(f"acceleration must be one of {ACCELERATIONS}, got {acceleration}")
    if pattern not in PATTERNS:
        raise ValueError(f"pattern must be one of {PATTERNS}, got {pattern!r}")
    budget = int(round(width / acceleration))
    center = center_count_for(budget, center_fraction)
    if budget < center:
        raise ValueError(f"line budget {budget} is smaller than the center block {center}")
    lo = width // 2 - center // 2
    center_lines = np.arange(lo, lo + center)
    candidates = np.setdiff1d(np.arange(width), center_lines)
    rest = budget - center
    if rest == 0:
        chosen = np.array([], dtype=int)
    elif pattern == "equispaced":
        step = len(candidates) // rest
        offset = (len(candidates) - ((rest - 1) * step + 1)) // 2
        chosen = candidates[offset + step * np.arange(rest)]
    else:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(candidates, size=rest, replace=False)
    lines = tuple(sorted(int(i) for i in np.concatenate([center_lines, chosen])))
    return SamplingMask(width, acceleration, pattern, seed, center, lines)


# ---------------------------------------------------------------- k-space data


@dataclass
class KSpaceData:
    """Under-sampled k-space (C, H, W) plus the mask that produced it."""

    samples: np.ndarray
    mask: SamplingMask

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim == 2:
            self.samples = self.samples[None]
        if self.samples.ndim != 3 or self.samples.shape[-1] != self.mask.width:
            raise ValueError(f"samples {self.samples.shape} do not match mask width {self.mask.width}")
        if np.any(self.samples[..., ~self.mask.columns()] != 0):
            raise ValueError("samples must be zero on unsampled columns")

    @property
    def coil_count(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[-2:]


@dataclass
class CoilSensitivities:
    maps: np.ndarray
    calibration_width: int = 0
    support: np.ndarray | None = field(default=None, repr=False)

    @property
    def coil_count(self) -> int:
        return self.maps.shape[0]


# ------------------------------------------------------------------ operators


def coil_expand(x, maps: np.ndarray) -> Tensor:
    """(..., H, W) image -> (..., C, H, W) coil images S_c x."""
    x = as_tensor(x)
    out = x.data[..., None, :, :] * maps

    def vjp(g, needs):
        return ((np.conj(maps) * g).sum(axis=-3),)

    return make_op("coil_expand", out, (x,), vjp)


def coil_combine(k, maps: np.ndarray) -> Tensor:
    """(..., C, H, W) -> sum_c conj(S_c) k_c, the adjoint of :func:`coil_expand`."""
    k = as_tensor(k)
    out = (np.conj(maps) * k.data).sum(axis=-3)

    def vjp(g, needs):
        return (g[..., None, :, :] * maps,)

    return make_op("coil_combine", out, (k,), vjp)


class EncodingOperator:
    """A = M F S on batched images (N, H, W) -> k-space (N, C, H, W).

    ``columns`` is a boolean (W,) or per-sample (N, W) pattern in native FFT
    order.  ``maps`` is (C, H, W) or (N, C, H, W); ``None`` means one coil
    with unit sensitivity.
    """

    def __init__(self, columns: np.ndarray, maps: np.ndarray | None = None):
        columns = np.asarray(columns, dtype=bool)
        if columns.ndim == 1:
            columns = columns[None]
        self.columns = columns
        self._mask = columns[:, None, None, :].astype(np.float64)
        self.maps = None if maps is None else np.asarray(maps, dtype=np.complex128)

    @property
    def coil_count(self) -> int:
        return 1 if self.maps is None else self.maps.shape[-3]

    def _check_image(self, x: Tensor) -> None:
        if x.ndim != 3:
            raise ValueError(f"expected batched image (N,H,W), got {x.shape}")
        if x.shape[-1] != self.columns.shape[-1]:
            raise ValueError(f"image width {x.shape[-1]} does not match mask width {self.columns.shape[-1]}")
        if self.maps is not None and self.maps.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"coil maps {self.maps.shape} do not match image {x.shape}")

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        self._check_image(x)
        n, h, w = x.shape
        if self.maps is None:
            coils = reshape(x, (n, 1, h, w))
        else:
            coils = coil_expand(x, self.maps)
        return mask_multiply(fft2(coils), np.broadcast_to(self._mask, (n, self.coil_count, h, w)))

    def adjoint(self, k) -> Tensor:
        k = as_tensor(k)
        n, c, h, w = k.shape
        if c != self.coil_count:
            raise ValueError(f"k-space has {c} coils, operator expects {self.coil_count}")
        if w != self.columns.shape[-1]:
            raise ValueError(f"k-space width {w} does not match mask width {self.columns.shape[-1]}")
        img = ifft2(mask_multiply(k, np.broadcast_to(self._mask, k.shape)))
        if self.maps is None:
            return reshape(img, (n, h, w))
        return coil_combine(img, self.maps)

    def normal(self, x) -> Tensor:
        return self.adjoint(self.forward(x))


def operator_for(batch: list[KSpaceData], sens: list[CoilSensitivities] | None = None):
    """Stack a batch of k-space records into (operator, k-space tensor)."""
    columns = np.stack([k.mask.columns() for k in batch])
    maps = None
    if sens is not None:
        maps = np.stack([s.maps for s in sens])
    elif batch[0].coil_count > 1:
        raise ValueError("multi-coil data needs coil sensitivities")
    samples = np.stack([k.samples for k in batch])
    return EncodingOperator(columns, maps), Tensor(samples)


def forward_single(x: np.ndarray, mask: SamplingMask) -> KSpaceData:
    """F_m x = M F x for one complex image."""
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 2 or x.shape[1] != mask.width:
        raise ValueError(f"image {x.shape} does not match mask width {mask.width}")
    op = EncodingOperator(mask.columns())
    return KSpaceData(op.forward(Tensor(x[None])).data[0], mask)


def adjoint_single(k: KSpaceData) -> np.ndarray:
    """F_m^H k = F^H M k."""
    if k.coil_count != 1:
        raise ValueError(f"adjoint_single needs one coil, got {k.coil_count}")
    op = EncodingOperator(k.mask.columns())
    return op.adjoint(Tensor(k.samples[None])).data[0]


def forward_multi(x: np.ndarray, sens: CoilSensitivities, mask: SamplingMask) -> KSpaceData:
    """E x = M F (S_c x) for every coil c."""
    x = np.asarray(x, dtype=np.complex128)
    if x.shape != sens.maps.shape[-2:]:
        raise ValueError(f"image {x.shape} does not match coil maps {sens.maps.shape}")
    op = EncodingOperator(mask.columns(), sens.maps)
    return KSpaceData(op.forward(Tensor(x[None])).data[0], mask)


def adjoint_multi(k: KSpaceData, sens: CoilSensitivities) -> np.ndarray:
    """E^H k = sum_c conj(S_c) F^H M k_c."""
    if k.coil_count != sens.coil_count:
        raise ValueError(f"k-space has {k.coil_count} coils, maps have {sens.coil_count}")
    op = EncodingOperator(k.mask.columns(), sens.maps)
    return op.adjoint(Tensor(k.samples[None])).data[0]


def rss(maps: np.ndarray) -> np.ndarray:
    return np.sqrt((np.abs(maps) ** 2).sum(axis=-3))


def estimate_sensitivities(k: KSpaceData, calibration_width: int | None = None,
                           support_level: float = 1e-3) -> CoilSensitivities:
    """Coil maps from the fully sampled center block, normalized to unit RSS.

    Each coil's calibration lines are inverse transformed to a low-resolution
    coil image; dividing by the root-sum-of-squares over coils gives maps
    with RSS 1 wherever the low-resolution RSS exceeds ``support_level``
    times its maximum (and 0 elsewhere).
    """
    calib = k.mask.center_count if calibration_width is None else calibration_width
    h, w = k.shape
    if k.coil_count == 1:
        return CoilSensitivities(np.ones((1, h, w), dtype=np.complex128), calib,
                                 np.ones((h, w), dtype=bool))
    if calib < 4:
        raise ValueError(f"calibration region needs at least 4 lines, got {calib}")
    lo = w // 2 - calib // 2
    window = np.zeros(w, dtype=bool)
    window[lo:lo + calib] = True
    window = np.fft.ifftshift(window)
    acs = np.where(window, k.samples, 0)
    if not np.any(acs):
        raise ValueError("calibration region is all zero")
    low = _fft.ifft2(acs)
    norm = rss(low)
    support = norm > support_level * norm.max()
    maps = np.where(support, low / np.where(support, norm, 1.0), 0)
    return CoilSensitivities(maps, calib, support)


def make_coil_maps(coils: int, height: int, width: int, seed: int = 0,
                   spread: float = 0.6) -> np.ndarray:
    """Smooth synthetic coil maps (Gaussian profiles around the FOV with a
    slowly varying phase), RSS-normalized to 1 everywhere."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    maps = []
    for c in range(coils):
        ang = 2 * np.pi * c / coils + rng.uniform(-0.2, 0.2)
        cy, cx = 1.2 * np.sin(ang), 1.2 * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spread ** 2))
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        maps.append(mag * np.exp(1j * phase))
    maps = np.array(maps)
    return maps / rss(maps)


def operator_norm(op: EncodingOperator, shape: tuple, iters: int = 100, seed: int = 0) -> float:
    """Largest eigenvalue of A^H A by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = op.normal(Tensor(x)).data
        lam = float(np.linalg.norm(y))
        x = y / lam
    return lam


# ------------------------------------------------------------------- phantoms

# intensity, semi-axis a, semi-axis b, center x, center y, rotation (deg)
SHEPP_LOGAN = np.array([
    [1.0, 0.69, 0.92, 0.0, 0.0, 0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0],
])


def _paint(height: int, width: int, ellipses) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(1, -1, height), np.linspace(-1, 1, width), indexing="ij")
    img = np.zeros((height, width))
    for rho, a, b, x0, y0, deg in ellipses:
        t = np.deg2rad(deg)
        dx, dy = xx - x0, yy - y0
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += rho
    return img


def _random_ellipses(rng: np.random.Generator) -> list:
    count = int(rng.integers(5, 13))
    head_a, head_b = rng.uniform(0.55, 0.85, size=2)
    ellipses = [(rng.uniform(0.5, 1.0), head_a, head_b,
                 rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), rng.uniform(-30, 30))]
    for _ in range(count - 1):
        r = rng.uniform(0, 0.6)
        phi = rng.uniform(0, 2 * np.pi)
        ellipses.append((rng.uniform(-0.4, 0.4), rng.uniform(0.04, 0.35), rng.uniform(0.04, 0.35),
                         r * head_a * np.cos(phi), r * head_b * np.sin(phi), rng.uniform(0, 180)))
    return ellipses


def make_phantom(height: int, width: int, kind: str = "random-ellipses", seed: int = 0,
                 phase: bool = False) -> np.ndarray:
    """Complex phantom with magnitude in [0, 1]."""
    if not (_fft.is_power_of_two(height) and _fft.is_power_of_two(width)):
        raise ValueError(f"phantom dims must be powers of two, got {height}x{width}")
    rng = np.random.default_rng(seed)
    if kind == "shepp-logan-like":
        mag = _paint(height, width, SHEPP_LOGAN)
    elif kind == "random-ellipses":
        mag = _paint(height, width, _random_ellipses(rng))
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    mag = np.clip(mag, 0.0, 1.0)
    if mag.max() > 0:
        mag = mag / max(mag.max(), 1.0)
    img = mag.astype(np.complex128)
    if phase:
        yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
        c = rng.uniform(-1, 1, size=4)
        img = img * np.exp(1j * (c[0] + c[1] * xx + c[2] * yy + c[3] * xx * yy))
        # |m e^{i phi}| can round to 1 + eps
        r = np.abs(img)
        img = np.where(r > 1.0, img / np.maximum(r, 1.0), img)
    return img


# ---------------------------------------------------------------------- noise


def add_kspace_noise(k: KSpaceData, sigma_n: float, seed: int = 0) -> KSpaceData:
    """Complex white Gaussian noise on sampled entries only.

    The noise standard deviation is ``sigma_n`` times the mean magnitude of the
    sampled entries; real and imaginary parts each get std/sqrt(2).
    """
    if sigma_n < 0:
        raise ValueError(f"sigma_n must be >= 0, got {sigma_n}")
    if sigma_n == 0:
        return KSpaceData(k.samples.copy(), k.mask)
    cols = k.mask.columns()
    sampled = np.broadcast_to(cols, k.samples.shape)
    std = sigma_n * np.abs(k.samples[sampled]).mean()
    rng = np.random.default_rng(seed)
    noise = (rng.standard_normal(k.samples.shape) + 1j * rng.standard_normal(k.samples.shape))
    noise *= std / np.sqrt(2.0)
    return KSpaceData(np.where(sampled, k.samples + noise, 0), k.mask)
