"""Voxel occupancy maps and Euclidean signed distance fields.

Sign convention: at a free voxel center the field stores the Euclidean
distance to the nearest occupied voxel center; at an occupied voxel center
it stores minus the distance to the nearest free voxel center.  Both sides
are capped at the truncation radius.  Between centers the field is
evaluated by trilinear interpolation, so the zero level sits inside the
one-voxel band separating free from occupied centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field as _field

import numpy as np

_INT_INF = np.int64(1) << 50
_CORNERS = np.array(list(np.ndindex(2, 2, 2)), dtype=np.int64)  # (8, 3)


class OutOfMapError(ValueError):
    """A query point lies outside the mapped volume."""

    def __init__(self, point) -> None:
        self.point = np.asarray(point, dtype=float).reshape(3)
        super().__init__(f"point {self.point.tolist()} is outside the map")


@dataclass(frozen=True, eq=False)
class BoxObstacle:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        return np.all((points >= lo) & (points <= hi), axis=-1)


@dataclass(frozen=True, eq=False)
class SphereObstacle:
    center: np.ndarray
    radius: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        d2 = np.sum((points - c) ** 2, axis=-1)
        return d2 <= self.radius**2


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Axis-aligned boolean occupancy grid; voxel centers at origin + (i+1/2)*resolution."""

    origin: np.ndarray
    resolution: float
    occupancy: np.ndarray  # bool, shape (nx, ny, nz)

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(self.occupancy.shape, dtype=np.int64)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.dims * self.resolution

    def voxel_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.resolution


def build_grid(obstacles, bounds_lo, bounds_hi, resolution: float) -> VoxelGrid:
    """Voxelize a list of box/sphere obstacles; a voxel is occupied iff its center
    lies inside any obstacle."""
    lo = np.asarray(bounds_lo, dtype=float).reshape(3)
    hi = np.asarray(bounds_hi, dtype=float).reshape(3)
    if resolution <= 0.0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    if np.any(hi - lo <= 0.0):
        raise ValueError(f"bounds must have positive extent, got {lo} .. {hi}")
    dims = np.maximum(np.ceil((hi - lo) / resolution - 1e-9).astype(np.int64), 1)
    axes = [lo[k] + (np.arange(dims[k]) + 0.5) * resolution for k in range(3)]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([cx, cy, cz], axis=-1)
    occ = np.zeros(tuple(dims), dtype=bool)
    for obs in obstacles:
        occ |= obs.contains(centers)
    return VoxelGrid(origin=lo, resolution=float(resolution), occupancy=occ)


def _squared_cell_distance(feature: np.ndarray) -> np.ndarray:
    """Exact squared distance (integer cell units) to the nearest True cell.

    Separable 3-pass composition of 1-D squared-distance lower envelopes;
    integer arithmetic keeps the result bit-exact against brute force.
    """
    sq = np.where(feature, np.int64(0), _INT_INF)
    for axis in range(3):
        n = sq.shape[axis]
        if n == 1:
            continue
        moved = np.moveaxis(sq, axis, 0)
        shape = moved.shape
        flat = moved.reshape(n, -1)
        out = np.empty_like(flat)
        offs = np.arange(n, dtype=np.int64)
        for i in range(n):
            out[i] = (flat + ((offs - i) ** 2)[:, None]).min(axis=0)
        sq = np.moveaxis(out.reshape(shape), 0, axis)
    return sq


@dataclass(frozen=True, eq=False)
class EsdfField:
    grid: VoxelGrid
    distance: np.ndarray  # float64, shape grid.dims
    truncation: float

    @property
    def lower(self) -> np.ndarray:
        return self.grid.origin

    @property
    def upper(self) -> np.ndarray:
        return self.grid.upper


def compute_esdf(grid: VoxelGrid, truncation: float = 5.0) -> EsdfField:
    """Signed distance at every voxel center, exact up to the truncation cap."""
    if truncation <= 0.0:
        raise ValueError(f"truncation must be positive, got {truncation}")
    occ = grid.occupancy
    res = grid.resolution
    sq_occ = _squared_cell_distance(occ)
    sq_free = _squared_cell_distance(~occ)
    dist = np.where(occ, -np.sqrt(sq_free.astype(float)), np.sqrt(sq_occ.astype(float))) * res
    dist = np.clip(dist, -truncation, truncation)
    return EsdfField(grid=grid, distance=dist, truncation=float(truncation))


def points_in_bounds(field: EsdfField, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.all((pts >= field.lower) & (pts <= field.upper), axis=1)


def _interp(field: EsdfField, points: np.ndarray, extend: bool, want_grad: bool):
    """Trilinear interpolation of the stored distances (and its analytic gradient).

    With extend=True, points outside the map are clamped to the boundary and
    the value is lowered by the exterior excursion (a 1-Lipschitz extension
    whose gradient points back into the map).  Gradients at interior cell
    faces use the left cell.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    grid = field.grid
    lo, hi = field.lower, field.upper
    res = grid.resolution
    dims = grid.dims
    if extend:
        q = np.clip(pts, lo, hi)
        out_vec = pts - q
    else:
        inside = (pts >= lo) & (pts <= hi)
        if not inside.all():
            bad = np.argmin(inside.all(axis=1))
            raise OutOfMapError(pts[bad])
        q = pts
        out_vec = None

    u = (q - lo) / res - 0.5
    i0 = np.floor(u)
    on_face = (u == i0) & (i0 >= 1.0)  # face tie-break: take the left cell
    i0 = np.where(on_face, i0 - 1.0, i0)
    i0 = np.clip(i0, 0, np.maximum(dims - 2, 0)).astype(np.int64)
    f = u - i0

    idx = np.minimum(i0[:, None, :] + _CORNERS[None, :, :], dims - 1)
    vals8 = field.distance[idx[..., 0], idx[..., 1], idx[..., 2]]  # (N, 8)
    w_axes = np.where(_CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
    values = (vals8 * w_axes.prod(axis=2)).sum(axis=1)

    grads = None
    if want_grad:
        grads = np.empty_like(pts)
        for ax in range(3):
            sign = np.where(_CORNERS[:, ax] == 1, 1.0, -1.0)[None, :]
            others = [b for b in range(3) if b != ax]
            w_other = w_axes[:, :, others[0]] * w_axes[:, :, others[1]]
            grads[:, ax] = (vals8 * sign * w_other).sum(axis=1) / res

    if extend and out_vec is not None:
        excursion = np.linalg.norm(out_vec, axis=1)
        values = values - excursion
        if want_grad:
            grads[out_vec != 0.0] = 0.0
            outside = excursion > 0.0
            grads[outside] -= out_vec[outside] / excursion[outside, None]
    return values, grads


def query_distance_many(field: EsdfField, points, extend: bool = False) -> np.ndarray:
    values, _ = _interp(field, points, extend, want_grad=False)
    return values


def query_distance(field: EsdfField, point) -> float:
    """Interpolated signed distance at a single point; raises OutOfMapError outside."""
    return float(query_distance_many(field, np.asarray(point, dtype=float).reshape(1, 3))[0])


def query_gradient_many(field: EsdfField, points, extend: bool = False) -> np.ndarray:
    _, grads = _interp(field, points, extend, want_grad=True)
    return grads


def query_gradient(field: EsdfField, point) -> np.ndarray:
    """Analytic gradient of the trilinear interpolant at a single point."""
    return query_gradient_many(field, np.asarray(point, dtype=float).reshape(1, 3))[0]


@dataclass(frozen=True, eq=False)
class BodyGeometry:
    """Cylindrical hull (lateral surface sampled at n_theta angles and n_l+1 rings)
    plus optional fixed attachment points modeling a grasped object."""

    radius: float
    height: float
    n_theta: int = 16
    n_l: int = 2
    r_min: float = 0.131
    r_max: float = 0.211
    attachments: np.ndarray = _field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if self.height <= 0.0 or self.n_theta < 3 or self.n_l < 1:
            raise ValueError("invalid body geometry")
        object.__setattr__(self, "attachments", np.asarray(self.attachments, dtype=float).reshape(-1, 3))

    def max_reach(self, radius: float) -> float:
        reach = float(np.hypot(radius, 0.5 * self.height))
        if len(self.attachments):
            reach = max(reach, float(np.max(np.linalg.norm(self.attachments, axis=1))))
        return reach


def surface_offsets(body: BodyGeometry, radius: float | None = None):
    """Body-frame sample points and their derivative w.r.t. the radius."""
    r = body.radius if radius is None else radius
    ang = 2.0 * np.pi * np.arange(body.n_theta) / body.n_theta
    zs = -0.5 * body.height + body.height * np.arange(body.n_l + 1) / body.n_l
    dirs = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)  # (n_theta, 3)
    lateral_dir = np.repeat(dirs, len(zs), axis=0)
    lateral = lateral_dir * r
    lateral[:, 2] = np.tile(zs, body.n_theta)
    radial = lateral_dir.copy()
    radial[:, 2] = 0.0
    if len(body.attachments):
        offsets = np.vstack([lateral, body.attachments])
        radial = np.vstack([radial, np.zeros_like(body.attachments)])
    else:
        offsets = lateral
    return offsets, radial


@dataclass(eq=False)
class ClearanceResult:
    distance: float
    point: np.ndarray
    grad_position: np.ndarray
    grad_radius: float


def clearance_batch(field: EsdfField, centers: np.ndarray, radii: np.ndarray,
                    body: BodyGeometry, rotation: np.ndarray | None = None,
                    extend: bool = False):
    """Minimum surface-sample distance for a batch of (center, radius) poses.

    Returns (distance (B,), worst point (B,3), grad wrt center (B,3),
    grad wrt radius (B,)).  Gradients chain through the active minimum sample.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    radii = np.asarray(radii, dtype=float).reshape(-1)
    n = centers.shape[0]

    ang = 2.0 * np.pi * np.arange(body.n_theta) / body.n_theta
    zs = -0.5 * body.height + body.height * np.arange(body.n_l + 1) / body.n_l
    dir_xy = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
    dir_lat = np.repeat(dir_xy, len(zs), axis=0)  # (L, 3)
    z_lat = np.tile(zs, body.n_theta)

    n_lat = dir_lat.shape[0]
    n_att = len(body.attachments)
    offsets = np.empty((n, n_lat + n_att, 3))
    offsets[:, :n_lat, :] = dir_lat[None, :, :] * radii[:, None, None]
    offsets[:, :n_lat, 2] = z_lat[None, :]
    if n_att:
        offsets[:, n_lat:, :] = body.attachments[None, :, :]
    radial = np.vstack([dir_lat, np.zeros((n_att, 3))]) if n_att else dir_lat

    if rotation is not None:
        rot = np.asarray(rotation, dtype=float).reshape(3, 3)
        offsets = offsets @ rot.T
        radial = radial @ rot.T

    world = centers[:, None, :] + offsets
    flat = world.reshape(-1, 3)
    dist = query_distance_many(field, flat, extend=extend).reshape(n, -1)
    sel = np.argmin(dist, axis=1)
    rows = np.arange(n)
    d_min = dist[rows, sel]
    worst = world[rows, sel]
    grad_pos = query_gradient_many(field, worst, extend=extend)
    grad_rad = np.einsum("ij,ij->i", grad_pos, radial[sel])
    return d_min, worst, grad_pos, grad_rad


def body_clearance(field: EsdfField, center, rotation, body: BodyGeometry,
                   extend: bool = False) -> ClearanceResult:
    """Whole-body clearance of the cylinder-plus-attachments hull at one pose."""
    d, pt, gp, gr = clearance_batch(
        field,
        np.asarray(center, dtype=float).reshape(1, 3),
        np.array([body.radius]),
        body,
        rotation=rotation,
        extend=extend,
    )
    return ClearanceResult(distance=float(d[0]), point=pt[0], grad_position=gp[0], grad_radius=float(gr[0]))


def dump_distances(field: EsdfField, path, fmt: str = "csv") -> None:
    """Debug dump of the per-voxel distances, row-major with x fastest."""
    flat = np.transpose(field.distance, (2, 1, 0))
    if fmt == "csv":
        nx = field.grid.dims[0]
        with open(path, "w", newline="\n") as fh:
            fh.write("# dims=%d,%d,%d resolution=%.17g\n" % (*field.grid.dims, field.grid.resolution))
            for row in flat.reshape(-1, nx):
                fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    elif fmt == "bin":
        flat.astype("<f8").ravel().tofile(path)
    else:
        raise ValueError(f"unknown dump format {fmt!r}")
