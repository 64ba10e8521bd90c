"""Desk-scale parallel-beam tomography testbed.

The image lives on the square ``[-1, 1]^2`` sampled by a ``side x side``
pixel grid.  Images are flat float64 vectors in row-major order: entry
``r * side + c`` is the pixel in row ``r`` (row 0 at the top, ``y = +1``)
and column ``c`` (column 0 at the left, ``x = -1``).

A projection sample ``(theta, t)`` integrates the image along the line
``{p : <p, (cos theta, sin theta)> = t}``.  Weights are exact
intersection lengths of that line with each pixel (Siddon's method), so
the forward operator and its adjoint share one sparse matrix.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Ellipse",
    "FormatError",
    "Geometry",
    "RadonProjector",
    "SHEPP_LOGAN",
    "Sinogram",
    "Study",
    "phantom_image",
    "projector",
    "radon_adjoint",
    "radon_apply",
    "read_image",
    "read_sinogram",
    "relative_error",
    "shepp_logan",
    "poisson_counts",
    "simulate_poisson",
    "simulated_study",
    "write_image",
    "write_pgm",
    "write_sinogram",
]


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam acquisition geometry.

    Angles are ``angle_min + (angle_max - angle_min) * k / n_angles`` for
    ``k = 0, ..., n_angles - 1`` (the upper end is excluded).  Detector
    offsets are the ``n_det`` cell centres of a uniform partition of
    ``[-1, 1]``.
    """

    n_angles: int
    n_det: int
    angle_min: float = 0.0
    angle_max: float = math.pi

    def __post_init__(self):
        if self.n_angles <= 0 or self.n_det <= 0:
            raise ValueError(
                f"degenerate geometry: n_angles={self.n_angles}, n_det={self.n_det}")
        if not self.angle_max > self.angle_min:
            raise ValueError("angle_max must exceed angle_min")

    @property
    def m(self):
        return self.n_angles * self.n_det

    @property
    def angles(self):
        k = np.arange(self.n_angles)
        return self.angle_min + (self.angle_max - self.angle_min) * k / self.n_angles

    @property
    def offsets(self):
        return -1.0 + (2.0 * np.arange(self.n_det) + 1.0) / self.n_det

    def angle_stripes(self, s):
        """Row ranges of ``s`` contiguous angle stripes covering all rays."""
        if not 1 <= s <= self.n_angles:
            raise ValueError(f"subset count {s} outside [1, {self.n_angles}]")
        cuts = np.linspace(0, self.n_angles, s + 1).round().astype(int)
        return [(int(a) * self.n_det, int(b) * self.n_det) for a, b in zip(cuts[:-1], cuts[1:])]


@dataclass
class Sinogram:
    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.geometry.m:
            raise ValueError(
                f"sinogram length {self.data.size} does not match geometry ({self.geometry.m})")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite entries")

    def as_array(self):
        return self.data.reshape(self.geometry.n_angles, self.geometry.n_det)


def _siddon_angle(theta, offsets, side):
    """Intersection lengths of all rays at one angle with the pixel grid.

    Returns ``(ray, pixel, length)`` triplets with ``ray`` indexing
    ``offsets``.
    """
    h = 2.0 / side
    c, s = math.cos(theta), math.sin(theta)
    dx, dy = -s, c
    # Base point of each ray; the ray is base + u * (dx, dy).
    px, py = offsets * c, offsets * s
    lines = -1.0 + h * np.arange(side + 1)
    nd = offsets.size
    big = np.inf

    if abs(dx) > 1e-12:
        ux = (lines[None, :] - px[:, None]) / dx
        lo_x = np.minimum(ux[:, 0], ux[:, -1])
        hi_x = np.maximum(ux[:, 0], ux[:, -1])
    else:
        ux = np.full((nd, 0), np.nan)
        inside = np.abs(px) < 1.0
        lo_x = np.where(inside, -big, big)
        hi_x = np.where(inside, big, -big)
    if abs(dy) > 1e-12:
        uy = (lines[None, :] - py[:, None]) / dy
        lo_y = np.minimum(uy[:, 0], uy[:, -1])
        hi_y = np.maximum(uy[:, 0], uy[:, -1])
    else:
        uy = np.full((nd, 0), np.nan)
        inside = np.abs(py) < 1.0
        lo_y = np.where(inside, -big, big)
        hi_y = np.where(inside, big, -big)

    u_in = np.maximum(lo_x, lo_y)
    u_out = np.minimum(hi_x, hi_y)
    hit = u_out > u_in
    if not np.any(hit):
        return np.empty(0, int), np.empty(0, int), np.empty(0)

    u = np.concatenate([ux, uy, u_in[:, None], u_out[:, None]], axis=1)[hit]
    u_in, u_out = u_in[hit], u_out[hit]
    u = np.where((u >= u_in[:, None]) & (u <= u_out[:, None]), u, np.nan)
    u.sort(axis=1)  # NaNs go last
    seg = np.diff(u, axis=1)
    mid = 0.5 * (u[:, 1:] + u[:, :-1])
    ok = np.isfinite(seg) & (seg > 1e-13)

    rays = np.nonzero(hit)[0]
    ray_idx = np.broadcast_to(rays[:, None], seg.shape)[ok]
    mid = mid[ok]
    base_x = np.broadcast_to(px[hit][:, None], seg.shape)[ok]
    base_y = np.broadcast_to(py[hit][:, None], seg.shape)[ok]
    x_mid = base_x + mid * dx
    y_mid = base_y + mid * dy
    col = np.clip(np.floor((x_mid + 1.0) / h).astype(int), 0, side - 1)
    row = np.clip(np.floor((1.0 - y_mid) / h).astype(int), 0, side - 1)
    return ray_idx, row * side + col, seg[ok]


class RadonProjector:
    """Sparse Siddon system matrix for a geometry and image side."""

    def __init__(self, geometry, side):
        if side < 1:
            raise ValueError("image side must be positive")
        self.geometry = geometry
        self.side = side
        offsets = geometry.offsets
        rows, cols, vals = [], [], []
        for a, theta in enumerate(geometry.angles):
            r, c, v = _siddon_angle(theta, offsets, side)
            rows.append(r + a * geometry.n_det)
            cols.append(c)
            vals.append(v)
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(geometry.m, side * side))
        # sum_duplicates fixes the entry order, so products are reproducible.
        self.matrix = mat.tocsr()
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        self._matrix_t = self.matrix.T.tocsr()

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, x):
        return self.matrix @ np.asarray(x, dtype=np.float64).ravel()

    def adjoint(self, y):
        return self._matrix_t @ np.asarray(y, dtype=np.float64).ravel()

    def row_norms(self):
        return np.sqrt(np.asarray(self.matrix.multiply(self.matrix).sum(axis=1)).ravel())

    def rows(self, start, stop):
        """Sub-operator restricted to rays ``start:stop``."""
        return self.matrix[start:stop]

    def dense(self):
        return self.matrix.toarray()

    def norm_squared(self, iters=200, seed=0):
        """Largest eigenvalue of ``R^T R`` by power iteration."""
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = self.adjoint(self.apply(v))
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                return 0.0
            v = w / lam
        return lam


@functools.lru_cache(maxsize=16)
def projector(geometry, side):
    """Cached :class:`RadonProjector` for ``(geometry, side)``."""
    return RadonProjector(geometry, side)


def _side_of(x):
    n = np.asarray(x).size
    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"image length {n} is not a perfect square")
    return side


def radon_apply(geometry, x):
    x = np.asarray(x, dtype=np.float64).ravel()
    return Sinogram(geometry, projector(geometry, _side_of(x)).apply(x))


def radon_adjoint(geometry, y, side):
    data = y.data if isinstance(y, Sinogram) else np.asarray(y, dtype=np.float64)
    return projector(geometry, side).adjoint(data)


# --------------------------------------------------------------------------
# Phantom
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    phi: float  # degrees, counter-clockwise rotation of the a-axis
    value: float

    def contains(self, x, y):
        t = math.radians(self.phi)
        c, s = math.cos(t), math.sin(t)
        u = (x - self.cx) * c + (y - self.cy) * s
        v = -(x - self.cx) * s + (y - self.cy) * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    @property
    def mirror_symmetric(self):
        return self.cx == 0.0 and self.phi == 0.0


# Shepp-Logan with the higher-contrast intensities of Toft's modification.
SHEPP_LOGAN = (
    Ellipse(0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    Ellipse(0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    Ellipse(0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    Ellipse(-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    Ellipse(0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    Ellipse(0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse(0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    Ellipse(-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    Ellipse(0.0, -0.606, 0.023, 0.023, 0.0, 0.1),
    Ellipse(0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
)


def pixel_centres(side):
    """Pixel-centre coordinate grids ``(X, Y)``, each ``side x side``."""
    c = -1.0 + (2.0 * np.arange(side) + 1.0) / side
    return np.meshgrid(c, -c)


def phantom_image(ellipses, side, scale=1.0):
    """Rasterize additive ellipses at pixel centres; negatives clip to 0."""
    if side < 2:
        raise ValueError("side must be at least 2")
    X, Y = pixel_centres(side)
    img = np.zeros((side, side))
    for e in ellipses:
        img[e.contains(X, Y)] += e.value
    return scale * np.maximum(img, 0.0).ravel()


def shepp_logan(side, scale=1.0):
    return phantom_image(SHEPP_LOGAN, side, scale)


# --------------------------------------------------------------------------
# Noise
# --------------------------------------------------------------------------

_POISSON_CAP = 1e10


def relative_error(x, ref):
    return float(np.linalg.norm(np.asarray(x) - ref) / np.linalg.norm(ref))


def poisson_counts(sino, n0, seed):
    """Beer-Lambert data ``ln(n0 / N)`` with ``N ~ Poisson(n0 exp(-p))``.

    Means above ``1e10`` use the normal approximation (the Poisson
    sampler overflows long before float64 does).  Zero counts clamp to 1.
    """
    p = sino.data if isinstance(sino, Sinogram) else np.asarray(sino, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lam = n0 * np.exp(-p)
    z = rng.standard_normal(p.size)
    counts = rng.poisson(np.minimum(lam, _POISSON_CAP)).astype(np.float64)
    big = lam > _POISSON_CAP
    counts[big] = np.round(lam[big] + np.sqrt(lam[big]) * z[big])
    counts = np.maximum(counts, 1.0)
    return np.log(n0) - np.log(counts)


def simulate_poisson(sino, target_rel_err, seed, log10_n0_range=(0.0, 30.0), tol=0.1):
    """Noisy sinogram whose l2 relative error is ``target_rel_err`` (+-10%).

    The incident photon count ``n0`` is found by bisection on ``log10 n0``
    with the same random stream at every trial.  Returns
    ``(noisy, achieved_rel_err, n0)``.
    """
    if np.any(sino.data < 0):
        raise ValueError("sinogram must be nonnegative")
    if not 0.0 < target_rel_err < 1.0:
        raise ValueError("target relative error must lie in (0, 1)")
    p = sino.data
    pnorm = np.linalg.norm(p)
    if pnorm == 0.0:
        raise ValueError("cannot calibrate noise on a zero sinogram")

    def err(log_n0):
        return np.linalg.norm(poisson_counts(p, 10.0**log_n0, seed) - p) / pnorm

    lo, hi = log10_n0_range
    e_lo, e_hi = err(lo), err(hi)
    if not e_hi <= target_rel_err <= e_lo:
        raise ValueError(
            f"target {target_rel_err} unreachable: achievable range [{e_hi:.4g}, {e_lo:.4g}]")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if err(mid) > target_rel_err:
            lo = mid
        else:
            hi = mid
    # Pick whichever bracket end lands closer.
    best = min((lo, hi), key=lambda t: abs(err(t) - target_rel_err))
    n0 = 10.0**best
    b = poisson_counts(p, n0, seed)
    achieved = float(np.linalg.norm(b - p) / pnorm)
    if abs(achieved - target_rel_err) > tol * target_rel_err:
        raise ValueError(
            f"calibration missed target {target_rel_err}: achieved {achieved:.4g}")
    return Sinogram(sino.geometry, b), achieved, n0


@dataclass
class Study:
    """A simulated acquisition: phantom, clean and noisy data in image units."""

    geometry: Geometry
    side: int
    phantom: np.ndarray
    clean: Sinogram
    noisy: Sinogram
    achieved: float
    n0: float
    unit: float

    @property
    def projector(self):
        return projector(self.geometry, self.side)


def simulated_study(side, n_angles, n_det, target_rel_err=0.1, seed=0, unit=1.0):
    """Shepp-Logan acquisition with Poisson noise at ``target_rel_err``.

    Counts are simulated on the phantom in physical attenuation units
    (peak 1, support of diameter 2), so the transmitted fraction is
    realistic.  The phantom and both sinograms are then multiplied by
    ``unit``; relative errors are unchanged.
    """
    g = Geometry(n_angles, n_det)
    x = shepp_logan(side)
    clean = radon_apply(g, x)
    noisy, achieved, n0 = simulate_poisson(clean, target_rel_err, seed)
    return Study(g, side, unit * x, Sinogram(g, unit * clean.data),
                 Sinogram(g, unit * noisy.data), achieved, n0, unit)


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

class FormatError(ValueError):
    """Malformed image or sinogram file; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _read_header(raw, magic, n_lines):
    if not raw:
        raise FormatError("empty file", 0)
    if not raw.startswith(magic + b"\n"):
        raise FormatError(f"expected magic {magic.decode()!r}", 0)
    pos = len(magic) + 1
    fields = []
    for _ in range(n_lines):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated header line", pos)
        fields.append((raw[pos:end].decode("ascii", "replace").split(), pos))
        pos = end + 1
    return fields, pos


def _payload(raw, pos, count):
    expected = 8 * count
    actual = len(raw) - pos
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes ({count} doubles), "
            f"found {actual}", pos)
    return np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)


def write_image(path, x):
    """Exact raw image: ``BIMG1\\n<side>\\n`` then side**2 little-endian doubles."""
    x = np.asarray(x, dtype=np.float64).ravel()
    side = _side_of(x)
    with open(path, "wb") as fh:
        fh.write(b"BIMG1\n%d\n" % side)
        fh.write(x.astype("<f8").tobytes())


def read_image(path):
    raw = Path(path).read_bytes()
    ((fields, at),), pos = _read_header(raw, b"BIMG1", 1)
    if len(fields) != 1 or not fields[0].isdigit() or int(fields[0]) < 1:
        raise FormatError("bad image side", at)
    side = int(fields[0])
    return _payload(raw, pos, side * side)


def write_sinogram(path, sino):
    g = sino.geometry
    with open(path, "wb") as fh:
        fh.write(b"BSIN1\n")
        fh.write(f"{g.n_angles} {g.n_det} {g.angle_min!r} {g.angle_max!r}\n".encode())
        fh.write(sino.data.astype("<f8").tobytes())


def read_sinogram(path):
    raw = Path(path).read_bytes()
    ((fields, at),), pos = _read_header(raw, b"BSIN1", 1)
    if len(fields) != 4:
        raise FormatError("sinogram header needs 4 fields", at)
    try:
        geometry = Geometry(int(fields[0]), int(fields[1]), float(fields[2]), float(fields[3]))
    except ValueError as exc:
        raise FormatError(f"bad sinogram header: {exc}", at) from None
    return Sinogram(geometry, _payload(raw, pos, geometry.m))


def write_pgm(path, x):
    """16-bit binary PGM for viewing, scaled so the maximum maps to 65535."""
    x = np.asarray(x, dtype=np.float64).ravel()
    side = _side_of(x)
    top = x.max()
    scaled = np.zeros_like(x) if top <= 0 else np.clip(x / top, 0.0, 1.0) * 65535.0
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (side, side))
        fh.write(np.round(scaled).astype(">u2").tobytes())
