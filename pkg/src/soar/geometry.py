"""Homogeneous-coordinate helpers: camera-to-camera calibration, rigid
occluder placement, perspective projection and 2D convex hulls."""
from dataclasses import dataclass

import numpy as np

from .errors import HullError, ProjectionError, SingularSystemError
from .skeleton import VERTICAL_AXIS

DEPTH_EPS = 1e-6
HULL_TOL = 1e-9
FOCUS_AXIS = 2


@dataclass(frozen=True, eq=False)
class AffineCalibration:
    """4x4 map of homogeneous column vectors from camera i to camera j."""

    matrix: np.ndarray
    residual_rms: float = 0.0

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise ValueError("calibration must be a finite 4x4 matrix")
        if np.abs(m[3] - [0.0, 0.0, 0.0, 1.0]).max() > 1e-9:
            raise ValueError("calibration last row must be (0, 0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __call__(self, points):
        return apply_calibration(self, points)

    def compose(self, first):
        """self after first."""
        return AffineCalibration(self.matrix @ first.matrix)

    def inverse(self):
        return AffineCalibration(np.linalg.inv(self.matrix))


def homogeneous(points):
    points = np.asarray(points, dtype=np.float64)
    return np.hstack([points, np.ones((len(points), 1))])


def estimate_calibration(x_i, x_j):
    """Least-squares affine map taking points ``x_i`` (M x 3) onto ``x_j``.

    Solves ``X_i_h @ F = X_j_h`` in homogeneous form with a QR-based solver
    (same minimizer as the normal equations, better conditioned).
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape or x_i.ndim != 2 or x_i.shape[1] != 3:
        raise ValueError(f"expected matching M x 3 arrays, got {x_i.shape} and {x_j.shape}")
    a = homogeneous(x_i)
    # centering keeps the rank test scale-free
    centered = x_i - x_i.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False) if len(x_i) > 1 else np.zeros(1)
    if len(x_i) < 4 or sv.min() <= 1e-10 * max(sv.max(), 1e-300):
        raise SingularSystemError("correspondences are coplanar or degenerate (rank < 4)")
    q, r = np.linalg.qr(a)
    sol = np.linalg.solve(r, q.T @ x_j)  # 4 x 3
    m = np.eye(4)
    m[:3, :] = sol.T
    resid = a @ sol - x_j
    return AffineCalibration(m, residual_rms=float(np.sqrt(np.mean(resid ** 2))))


def apply_calibration(calibration, points):
    m = calibration.matrix if isinstance(calibration, AffineCalibration) else np.asarray(calibration)
    h = homogeneous(points) @ m.T
    return h[:, :3] / h[:, 3:4]


def calibrate_cameras(dataset):
    """Estimate every ordered camera-pair calibration from groups of
    simultaneously captured samples.  Returns ``{(i, j): AffineCalibration}``."""
    pts = {}
    for members in dataset.groups().values():
        by_cam = {s.camera_id: s for s in members}
        for i, si in by_cam.items():
            for j, sj in by_cam.items():
                if i == j:
                    continue
                valid = ~(si.mask | sj.mask)
                pts.setdefault((i, j), ([], []))
                pts[(i, j)][0].append(si.data[valid])
                pts[(i, j)][1].append(sj.data[valid])
    out = {}
    for key, (a, b) in pts.items():
        out[key] = estimate_calibration(np.concatenate(a), np.concatenate(b))
    for cam in {s.camera_id for s in dataset.samples}:
        out[(cam, cam)] = AffineCalibration(np.eye(4))
    return out


@dataclass(frozen=True)
class RigidAugment:
    yaw: float
    translation: tuple

    def rotation(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def apply(self, vertices, pivot):
        """Rotate about the vertical axis through ``pivot``, then translate."""
        v = np.asarray(vertices, dtype=np.float64) - pivot
        return v @ self.rotation().T + pivot + np.asarray(self.translation)


def _horizontal_axes():
    return [a for a in range(3) if a != VERTICAL_AXIS]


def rigid_augment(vertices, skeleton, rng, radius=(0.4, 1.2), yaw=None, horizontal=None):
    """Randomly yaw the mesh about its own vertical axis and slide it to a
    random spot on an annulus (``radius`` = inner, outer) around the
    skeleton's horizontal centroid, then shift it vertically so its lowest
    vertex sits at the level of the skeleton's lowest joint over all frames.

    ``yaw`` and ``horizontal`` (the mesh's horizontal displacement) override
    the random draws; ``yaw=0, horizontal=(0, 0)`` leaves only the vertical
    alignment.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) < 4:
        raise ValueError("occluder needs at least 4 vertices")
    joints = skeleton.data[~skeleton.mask].astype(np.float64)
    if len(joints) == 0:
        joints = skeleton.data.reshape(-1, 3).astype(np.float64)
    h = _horizontal_axes()
    center = vertices.mean(axis=0)
    if yaw is None:
        yaw = rng.uniform(0.0, 2 * np.pi)
    if horizontal is None:
        target = joints.mean(axis=0)
        r = rng.uniform(*radius)
        ang = rng.uniform(0.0, 2 * np.pi)
        horizontal = (target[h[0]] + r * np.cos(ang) - center[h[0]],
                      target[h[1]] + r * np.sin(ang) - center[h[1]])
    shift = np.zeros(3)
    shift[h[0]], shift[h[1]] = horizontal
    rot = RigidAugment(yaw, (0.0, 0.0, 0.0)).apply(vertices, center)
    shift[VERTICAL_AXIS] = joints[:, VERTICAL_AXIS].min() - rot[:, VERTICAL_AXIS].min()
    aug = RigidAugment(float(yaw), tuple(float(v) for v in shift))
    return aug.apply(vertices, center), aug


def perspective_project(points, depth_eps=DEPTH_EPS):
    """Divide by the focus-axis coordinate; points at or behind the camera
    plane raise ``ProjectionError``."""
    points = np.asarray(points, dtype=np.float64)
    depth = points[:, FOCUS_AXIS]
    bad = np.flatnonzero(~(depth > depth_eps))
    if bad.size:
        raise ProjectionError(f"point {bad[0]} has depth {depth[bad[0]]:.3g} <= {depth_eps}",
                              index=int(bad[0]))
    return points[:, :2] / depth[:, None]


@dataclass(frozen=True, eq=False)
class ConvexHull2D:
    vertices: np.ndarray  # (V, 2) counter-clockwise
    normals: np.ndarray   # A, unit outward normals (V, 2)
    offsets: np.ndarray   # b, interior is A @ p + b <= 0

    @property
    def halfspaces(self):
        return self.normals, self.offsets

    def contains(self, points, tol=HULL_TOL):
        return is_in_hull(self, points, tol)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points):
    """Andrew's monotone chain; collinear boundary points are dropped."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise HullError("need at least 3 two-dimensional points")
    if not np.all(np.isfinite(pts)):
        raise HullError("non-finite hull input")
    uniq = np.unique(pts, axis=0)
    order = sorted(map(tuple, uniq))
    if len(order) < 3:
        raise HullError("fewer than 3 distinct points")

    def chain(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = chain(order)
    upper = chain(reversed(order))
    verts = np.array(lower[:-1] + upper[:-1])
    if len(verts) < 3:
        raise HullError("points are collinear")
    nxt = np.roll(verts, -1, axis=0)
    edge = nxt - verts
    normals = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
    normals /= np.hypot(normals[:, 0], normals[:, 1])[:, None]
    if not np.all(np.isfinite(normals)):
        raise HullError("degenerate hull edge")
    offsets = -np.einsum("ij,ij->i", normals, verts)
    return ConvexHull2D(verts, normals, offsets)


def is_in_hull(hull, points, tol=HULL_TOL):
    """True where every half-space constraint holds (boundary counts as inside)."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    inside = np.all(p @ hull.normals.T + hull.offsets <= tol, axis=1)
    return bool(inside[0]) if single else inside


def aabb(points):
    points = np.asarray(points, dtype=np.float64)
    return points.min(axis=0), points.max(axis=0)


def aabb_disjoint(a, b):
    (alo, ahi), (blo, bhi) = aabb(a), aabb(b)
    return bool(np.any(ahi < blo) or np.any(bhi < alo))
