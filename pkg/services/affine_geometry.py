"""
Construction, sampling, application and inversion of 6-DoF affine transforms.

Conventions used throughout:
    * Pixel coordinates, x to the right, y down, pixel centres on integers.
      The image centre is ((W - 1) / 2, (H - 1) / 2).
    * H = C . T . R . Sh . Sc . C^-1 (scale, then shear, then rotate, then
      translate, all about the image centre).
    * Sh = Shx . Shy with Shx = [[1, tan sx], [0, 1]] and
      Shy = [[1, 0], [tan sy, 1]], so det(H) = sigma^2.
    * warp(img, H)(q) = img(H^-1 q), bilinear, zero outside the source.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from models.batches import ImageBatch
from models.exceptions import ConfigurationError, ContractError, NumericError
from models.schemas import PARAM_NAMES, AffineParams, AffineRanges, ComponentMask

SINGULAR_DET = 1e-12
MIN_POLYGON_AREA = 1.0
IDENTITY_VECTOR = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])

# Inscribed-rectangle search resolution
_COARSE_SAMPLES = 129
_ZOOM_SAMPLES = 33
_ZOOM_ROUNDS = 8
_EDGE_MARGIN = 1e-7


@dataclass(frozen=True)
class AffineMatrix:
    """A 3x3 homogeneous affine matrix tied to the image size it was built for."""

    m: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ContractError(f"AffineMatrix must be 3x3, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ContractError(f"AffineMatrix bottom row must be [0, 0, 1], got {m[2].tolist()}")
        object.__setattr__(self, "m", m)

    def __matmul__(self, other: "AffineMatrix") -> "AffineMatrix":
        return AffineMatrix(self.m @ other.m, self.width, self.height)


@dataclass(frozen=True)
class BoundedCropRect:
    """Axis-aligned rectangle in pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise NumericError(f"Degenerate rectangle ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> np.ndarray:
        return np.array([
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x1, self.y1],
            [self.x0, self.y1],
        ])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def check_ranges(ranges: AffineRanges, mask: Optional[ComponentMask] = None) -> None:
    """Raise ConfigurationError unless every interval can be sampled."""
    intervals = {
        "rotation": ranges.rotation,
        "translation": ranges.translation,
        "scale": ranges.scale,
        "shear": ranges.shear,
    }
    for name, (lo, hi) in intervals.items():
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ConfigurationError(f"{name} interval must be finite, got ({lo}, {hi})")
        if lo > hi:
            raise ConfigurationError(f"{name} interval has lo > hi: ({lo}, {hi})")
    if ranges.scale[0] <= 0.0:
        raise ConfigurationError(f"scale interval must be strictly positive, got {ranges.scale}")
    if ranges.translation[0] < 0.0:
        raise ConfigurationError(f"translation interval is a magnitude and must be >= 0, got {ranges.translation}")
    if max(abs(ranges.shear[0]), abs(ranges.shear[1])) >= 90.0:
        raise ConfigurationError(f"shear angles must stay inside (-90, 90), got {ranges.shear}")
    if mask is not None and mask.is_empty():
        raise ConfigurationError("at least one affine component must be enabled")


def sample_affine_param_array(
    rng: np.random.Generator,
    mask: ComponentMask,
    ranges: AffineRanges,
    size: int,
) -> np.ndarray:
    """
    Draw `size` parameter vectors, shape (size, 6), columns ordered as PARAM_NAMES.

    The generator is always advanced by the same amount regardless of the
    mask, so disabling a component never shifts the other components' draws.
    """
    check_ranges(ranges, mask)

    theta = rng.uniform(ranges.rotation[0], ranges.rotation[1], size=size)
    magnitude = rng.uniform(ranges.translation[0], ranges.translation[1], size=(size, 2))
    signs = rng.integers(0, 2, size=(size, 2)) * 2 - 1
    sigma = rng.uniform(ranges.scale[0], ranges.scale[1], size=size)
    shear = rng.uniform(ranges.shear[0], ranges.shear[1], size=(size, 2))

    translation = magnitude * signs if ranges.signed_translation else magnitude

    params = np.empty((size, len(PARAM_NAMES)), dtype=np.float64)
    params[:, 0] = theta
    params[:, 1:3] = translation
    params[:, 3] = sigma
    params[:, 4:6] = shear

    if not mask.use_rotation:
        params[:, 0] = IDENTITY_VECTOR[0]
    if not mask.use_translation:
        params[:, 1:3] = IDENTITY_VECTOR[1:3]
    if not mask.use_scale:
        params[:, 3] = IDENTITY_VECTOR[3]
    if not mask.use_shear:
        params[:, 4:6] = IDENTITY_VECTOR[4:6]
    return params


def sample_affine_params(
    rng: np.random.Generator,
    mask: ComponentMask,
    ranges: AffineRanges,
) -> AffineParams:
    """Draw one parameter vector; disabled components sit at identity values."""
    return AffineParams.from_vector(sample_affine_param_array(rng, mask, ranges, 1)[0])


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------


def build_matrices(params: np.ndarray, width: int, height: int) -> np.ndarray:
    """Vectorised build_matrix: (n, 6) parameter rows to (n, 3, 3) matrices."""
    if width < 1 or height < 1:
        raise ContractError(f"Image size must be at least 1x1, got {width}x{height}")
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    n = params.shape[0]
    theta = np.deg2rad(params[:, 0])
    tx = params[:, 1] * width
    ty = params[:, 2] * height
    sigma = params[:, 3]
    shear_x = np.tan(np.deg2rad(params[:, 4]))
    shear_y = np.tan(np.deg2rad(params[:, 5]))

    cos, sin = np.cos(theta), np.sin(theta)

    # Sh = Shx . Shy = [[1 + kx ky, kx], [ky, 1]], det 1 for any |sx|, |sy| < 90
    sh00 = 1.0 + shear_x * shear_y

    # A = R . Sh . Sc
    a = np.empty((n, 2, 2))
    a[:, 0, 0] = sigma * (cos * sh00 - sin * shear_y)
    a[:, 0, 1] = sigma * (cos * shear_x - sin)
    a[:, 1, 0] = sigma * (sin * sh00 + cos * shear_y)
    a[:, 1, 1] = sigma * (sin * shear_x + cos)

    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    # C . T . A . C^-1 has translation column c + t - A c
    offset = center[None, :] + np.stack([tx, ty], axis=1) - np.einsum("nij,j->ni", a, center)

    matrices = np.zeros((n, 3, 3))
    matrices[:, :2, :2] = a
    matrices[:, :2, 2] = offset
    matrices[:, 2, 2] = 1.0
    return matrices


def build_matrix(p: AffineParams, width: int, height: int) -> AffineMatrix:
    """Homogeneous matrix of `p` for a width x height image, pivoting on the centre."""
    return AffineMatrix(build_matrices(p.to_vector(), width, height)[0], width, height)


def invert_matrices(matrices: np.ndarray) -> np.ndarray:
    """Closed-form inverse of (n, 3, 3) affine matrices."""
    matrices = np.asarray(matrices, dtype=np.float64)
    single = matrices.ndim == 2
    if single:
        matrices = matrices[None]
    a = matrices[:, :2, :2]
    det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    if np.any(np.abs(det) < SINGULAR_DET):
        raise NumericError(f"Affine matrix is singular (|det| = {np.abs(det).min():.3e})")
    a_inv = np.empty_like(a)
    a_inv[:, 0, 0] = a[:, 1, 1] / det
    a_inv[:, 0, 1] = -a[:, 0, 1] / det
    a_inv[:, 1, 0] = -a[:, 1, 0] / det
    a_inv[:, 1, 1] = a[:, 0, 0] / det
    inverse = np.zeros_like(matrices)
    inverse[:, :2, :2] = a_inv
    inverse[:, :2, 2] = -np.einsum("nij,nj->ni", a_inv, matrices[:, :2, 2])
    inverse[:, 2, 2] = 1.0
    return inverse[0] if single else inverse


def invert(m: AffineMatrix) -> AffineMatrix:
    return AffineMatrix(invert_matrices(m.m), m.width, m.height)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def _sampling_grid(inverse: np.ndarray, width: int, height: int, dtype, device) -> torch.Tensor:
    """grid_sample grid (n, H, W, 2) that reads the source at inverse . q for each output pixel q."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    coords = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=0)  # (3, HW)
    source = np.einsum("nij,jp->npi", inverse[:, :2, :], coords)  # (n, HW, 2)
    scale = np.array([2.0 / max(width - 1, 1), 2.0 / max(height - 1, 1)])
    normalized = source * scale - 1.0
    grid = normalized.reshape(inverse.shape[0], height, width, 2)
    return torch.as_tensor(grid, dtype=dtype, device=device)


def warp_tensor(images: torch.Tensor, matrices: np.ndarray) -> torch.Tensor:
    """
    Warp a (B, C, H, W) tensor by one matrix (3, 3) or one matrix per element (B, 3, 3).

    Gradients flow to `images`; the matrices are constants.
    """
    if images.dim() != 4:
        raise ContractError(f"Expected a (B, C, H, W) tensor, got shape {tuple(images.shape)}")
    batch, _, height, width = images.shape
    matrices = np.asarray(matrices, dtype=np.float64)
    if matrices.ndim == 2:
        matrices = np.broadcast_to(matrices, (batch, 3, 3))
    if matrices.shape != (batch, 3, 3):
        raise ContractError(f"Expected {batch} matrices, got array of shape {matrices.shape}")
    inverse = invert_matrices(np.ascontiguousarray(matrices))
    grid = _sampling_grid(inverse, width, height, images.dtype, images.device)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def warp_image(img: Union[ImageBatch, torch.Tensor], m: AffineMatrix) -> Union[ImageBatch, torch.Tensor]:
    """Apply `m` to every image of the batch; output has the input's shape."""
    data = img.data if isinstance(img, ImageBatch) else img
    if data.dim() != 4 or (data.shape[2], data.shape[3]) != (m.height, m.width):
        raise ContractError(
            f"Matrix built for {m.width}x{m.height} images, got tensor of shape {tuple(data.shape)}"
        )
    warped = warp_tensor(data, m.m)
    return img.with_data(warped) if isinstance(img, ImageBatch) else warped


# ---------------------------------------------------------------------------
# Footprint and bounded crop
# ---------------------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counterclockwise order (x right, y up)."""
    poly = np.asarray(poly, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def footprint_polygon(m: AffineMatrix, width: int, height: int) -> np.ndarray:
    """Images of the four source corners under m, (4, 2), counterclockwise."""
    corners = np.array([
        [0.0, 0.0, 1.0],
        [width - 1.0, 0.0, 1.0],
        [width - 1.0, height - 1.0, 1.0],
        [0.0, height - 1.0, 1.0],
    ])
    poly = (m.m @ corners.T).T[:, :2]
    if polygon_area(poly) < 0.0:
        poly = poly[::-1].copy()
    return poly


def point_in_polygon(point: Sequence[float], poly: np.ndarray, tol: float = 1e-6) -> bool:
    """Inside-or-on test for a convex polygon, `tol` in pixels."""
    poly = np.asarray(poly, dtype=np.float64)
    if polygon_area(poly) < 0.0:
        poly = poly[::-1]
    p = np.asarray(point, dtype=np.float64)
    start = poly
    end = np.roll(poly, -1, axis=0)
    edge = end - start
    rel = p[None, :] - start
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    # cross / |edge| is the signed distance to each edge line
    distance = cross / np.maximum(np.linalg.norm(edge, axis=1), 1e-300)
    return bool(np.all(distance >= -tol))


def _horizontal_extent(poly: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Left and right x of the polygon's chord at each height in `ys`."""
    ys = np.asarray(ys, dtype=np.float64)[:, None]
    start = poly
    end = np.roll(poly, -1, axis=0)
    px, py = start[:, 0], start[:, 1]
    qx, qy = end[:, 0], end[:, 1]
    dy = qy - py
    flat = np.abs(dy) < 1e-12
    t = (ys - py) / np.where(flat, 1.0, dy)
    x = px + t * (qx - px)
    lo, hi = np.minimum(py, qy), np.maximum(py, qy)
    crosses = (ys >= lo - 1e-12) & (ys <= hi + 1e-12) & ~flat
    on_flat = flat & (np.abs(ys - py) <= 1e-12)

    left = np.where(crosses, x, np.inf).min(axis=1)
    right = np.where(crosses, x, -np.inf).max(axis=1)
    left = np.minimum(left, np.where(on_flat, np.minimum(px, qx), np.inf).min(axis=1))
    right = np.maximum(right, np.where(on_flat, np.maximum(px, qx), -np.inf).max(axis=1))
    return left, right


def _best_on_grid(poly, y0s, y1s):
    l0, r0 = _horizontal_extent(poly, y0s)
    l1, r1 = _horizontal_extent(poly, y1s)
    left = np.maximum(l0[:, None], l1[None, :])
    right = np.minimum(r0[:, None], r1[None, :])
    height = y1s[None, :] - y0s[:, None]
    area = np.where(height > 0.0, height * np.clip(right - left, 0.0, None), -1.0)
    i, j = np.unravel_index(np.argmax(area), area.shape)
    return float(area[i, j]), float(y0s[i]), float(y1s[j]), float(left[i, j]), float(right[i, j])


def max_inscribed_rect(poly: np.ndarray) -> BoundedCropRect:
    """
    Largest axis-aligned rectangle inside a convex polygon.

    For a horizontal band [y0, y1] of a convex polygon the widest inscribed
    rectangle spans max(left(y0), left(y1)) to min(right(y0), right(y1)), and
    the resulting area is quasi-concave in (y0, y1). The search enumerates
    band edges on a grid that includes every vertex height, then zooms in on
    the best candidate.
    """
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise ContractError(f"Polygon must be (k >= 3, 2), got {poly.shape}")
    area = polygon_area(poly)
    if abs(area) + 1e-9 < MIN_POLYGON_AREA:
        raise NumericError(f"Degenerate polygon (area {abs(area):.3e} px^2)")
    if area < 0.0:
        poly = poly[::-1].copy()

    y_min, y_max = float(poly[:, 1].min()), float(poly[:, 1].max())
    candidates = np.union1d(np.linspace(y_min, y_max, _COARSE_SAMPLES), poly[:, 1])
    best = _best_on_grid(poly, candidates, candidates)

    step = (y_max - y_min) / (_COARSE_SAMPLES - 1)
    for _ in range(_ZOOM_ROUNDS):
        _, y0, y1, _, _ = best
        y0s = np.clip(np.linspace(y0 - 2 * step, y0 + 2 * step, _ZOOM_SAMPLES), y_min, y_max)
        y1s = np.clip(np.linspace(y1 - 2 * step, y1 + 2 * step, _ZOOM_SAMPLES), y_min, y_max)
        refined = _best_on_grid(poly, y0s, y1s)
        if refined[0] >= best[0]:
            best = refined
        step = 4 * step / (_ZOOM_SAMPLES - 1)

    _, y0, y1, x0, x1 = best
    margin = _EDGE_MARGIN * max(1.0, y_max - y_min)
    return BoundedCropRect(x0 + margin, y0 + margin, x1 - margin, y1 - margin)


def crop_resize_matrix(rect: BoundedCropRect, width: int, height: int) -> np.ndarray:
    """Map output pixel q' of a crop resized to width x height onto rect coordinates."""
    scale_x = rect.width / max(width - 1, 1)
    scale_y = rect.height / max(height - 1, 1)
    return np.array([
        [scale_x, 0.0, rect.x0],
        [0.0, scale_y, rect.y0],
        [0.0, 0.0, 1.0],
    ])


def bounded_warp_matrix(m: AffineMatrix) -> Tuple[AffineMatrix, BoundedCropRect]:
    """
    Matrix whose warp equals warp-by-m, crop the maximal inscribed rectangle,
    resize back to the original resolution, in a single resampling.
    """
    rect = max_inscribed_rect(footprint_polygon(m, m.width, m.height))
    crop = crop_resize_matrix(rect, m.width, m.height)
    composite = invert_matrices(crop) @ m.m
    composite[2] = [0.0, 0.0, 1.0]
    return AffineMatrix(composite, m.width, m.height), rect


# ---------------------------------------------------------------------------
# Regression targets
# ---------------------------------------------------------------------------


def normalize_param_array(
    params: np.ndarray,
    ranges: AffineRanges,
    columns: Optional[Sequence[int]] = None,
    tol: float = 1e-9,
) -> np.ndarray:
    """
    Map parameters affinely from their sampling interval to [-1, 1].

    `params` has one column per entry of `columns` (all six by default).
    Collapsed intervals map to 0.
    """
    columns = list(range(len(PARAM_NAMES))) if columns is None else list(columns)
    params = np.asarray(params, dtype=np.float64)
    intervals = ranges.target_intervals()[columns]
    lo, hi = intervals[:, 0], intervals[:, 1]
    if np.any(params < lo - tol) or np.any(params > hi + tol):
        names = [PARAM_NAMES[c] for c in columns]
        raise ContractError(f"Parameters outside their sampling intervals for {names}")
    span = hi - lo
    safe = np.where(span > 0.0, span, 1.0)
    return np.where(span > 0.0, 2.0 * (params - lo) / safe - 1.0, 0.0)


def denormalize_param_array(
    values: np.ndarray,
    ranges: AffineRanges,
    columns: Optional[Sequence[int]] = None,
) -> np.ndarray:
    columns = list(range(len(PARAM_NAMES))) if columns is None else list(columns)
    values = np.asarray(values, dtype=np.float64)
    intervals = ranges.target_intervals()[columns]
    lo, hi = intervals[:, 0], intervals[:, 1]
    return lo + (values + 1.0) * 0.5 * (hi - lo)


def normalize_params(p: AffineParams, ranges: AffineRanges) -> np.ndarray:
    return normalize_param_array(p.to_vector(), ranges)


def denormalize_params(values: np.ndarray, ranges: AffineRanges) -> AffineParams:
    return AffineParams.from_vector(denormalize_param_array(values, ranges))
