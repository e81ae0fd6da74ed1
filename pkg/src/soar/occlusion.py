"""Occlusion operators for skeleton sequences.

Realistic occlusion drops a furniture-like vertex cloud next to the person,
projects it with each camera and masks every joint that falls inside the
projected convex hull.  The random operators blank cells, whole frames or a
fixed number of joints per frame.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import ConfigurationError, HullError, OcclusionError, ProjectionError


@dataclass(frozen=True, eq=False)
class OccluderModel:
    vertices: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 4:
            raise ConfigurationError(f"occluder '{self.name}' needs at least 4 xyz vertices")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError(f"occluder '{self.name}' has non-finite vertices")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)


@dataclass(frozen=True)
class OcclusionConfig:
    snr_range: tuple = (0.05, 0.2)
    min_occluded_per_group: int = 1   # views that must land in snr_range
    max_retries: int = 25
    max_placements: int = 200         # "no intersection" draws per attempt
    radius: tuple = (0.5, 1.5)        # placement annulus around the person, meters
    gamma: float = 0.1
    n_frames: int = 10
    n_joints: int = 5
    seed: int = 0

    def __post_init__(self):
        a, b = self.snr_range
        if not 0 < a < b < 1:
            raise ConfigurationError(f"snr_range must satisfy 0 < a < b < 1, got {self.snr_range}")
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if self.min_occluded_per_group < 1 or self.max_retries < 0:
            raise ConfigurationError("invalid retry settings")


def _box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=float)
    return lo + corners * (hi - lo)


def make_box(width, height, depth, name="box"):
    return OccluderModel(_box([0, 0, 0], [width, height, depth]), name)


def make_table(width=1.2, height=0.75, depth=0.7, leg=0.06, top=0.05, name="table"):
    parts = [_box([0, height - top, 0], [width, height, depth])]
    for x in (0.0, width - leg):
        for z in (0.0, depth - leg):
            parts.append(_box([x, 0, z], [x + leg, height - top, z + leg]))
    return OccluderModel(np.vstack(parts), name)


def make_chair(width=0.5, seat=0.45, depth=0.5, back=0.95, leg=0.04, name="chair"):
    parts = [_box([0, seat - 0.05, 0], [width, seat, depth]),
             _box([0, seat, depth - 0.05], [width, back, depth])]
    for x in (0.0, width - leg):
        for z in (0.0, depth - leg):
            parts.append(_box([x, 0, z], [x + leg, seat - 0.05, z + leg]))
    return OccluderModel(np.vstack(parts), name)


def default_library():
    """Procedural stand-ins for a furniture mesh collection (8-48 vertices)."""
    return [
        make_box(0.6, 0.9, 0.5, "cabinet"),
        make_box(1.0, 0.5, 0.5, "low_box"),
        make_box(0.45, 1.4, 0.45, "bookshelf"),
        make_table(),
        make_table(0.8, 1.0, 0.6, name="bar_table"),
        make_chair(),
        make_chair(0.6, 0.5, 0.6, 1.1, name="armchair"),
    ]


def load_occluder(path):
    """Read a text mesh: one ``x y z`` float triple per line ('#' comments ok)."""
    path = Path(path)
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigurationError(f"{path}:{n}: expected 'x y z'")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ConfigurationError(f"{path}:{n}: {exc}") from exc
    return OccluderModel(np.array(rows), path.stem)


def save_occluder(model, path):
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in model.vertices.tolist()))


def load_library(directory):
    files = sorted(p for p in Path(directory).iterdir() if p.suffix in (".txt", ".xyz"))
    if not files:
        raise ConfigurationError(f"no occluder meshes (*.txt, *.xyz) in {directory}")
    return [load_occluder(p) for p in files]


def snr_of(mask):
    """Fraction of occluded cells."""
    mask = np.asarray(mask, dtype=bool)
    return float(mask.sum()) / mask.size if mask.size else 0.0


def snr_histogram(samples, bin_edges):
    """Counts of per-sample occlusion ratios; values are clipped into the
    outer edges so the counts always sum to the number of samples."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigurationError("bin edges must be strictly increasing")
    values = np.array([snr_of(s.mask) for s in samples], dtype=np.float64)
    counts, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
    return counts


def hull_mask(hull, joints_2d, valid):
    """Per-cell membership of projected joints (T x J x 2) in ``hull``."""
    t, j, _ = joints_2d.shape
    inside = geo.is_in_hull(hull, joints_2d.reshape(-1, 2)).reshape(t, j)
    return inside & valid


def _project_view(sample, vertices):
    """Mask cells of ``sample`` whose projection lies in the mesh's projected hull."""
    mesh_2d = geo.perspective_project(vertices)
    hull = geo.convex_hull_2d(mesh_2d)
    valid = ~sample.mask
    pts = sample.data.astype(np.float64)
    joints_2d = np.zeros(pts.shape[:2] + (2,))
    joints_2d[valid] = geo.perspective_project(pts[valid])
    return hull_mask(hull, joints_2d, valid)


@dataclass
class RealisticResult:
    samples: list
    snr: list
    accepted: bool
    attempts: int
    occluder: str
    views: dict = field(default_factory=dict)  # camera_id -> occluder vertices in that frame


def _skeleton_points(sample):
    return sample.data[~sample.mask].astype(np.float64)


def occlude_realistic_3d(group, calibrations, occluders, config, rng):
    """Occlude a group of simultaneously captured 3D samples with one shared
    occluder placement.

    The occluder is placed in the first sample's camera frame and carried to
    the other views with ``calibrations[(ref_cam, cam)]``.  A placement is
    kept only if, in every view, the mesh's axis-aligned bounding box is
    disjoint from the skeleton's (over all frames) and the mesh lies in front
    of the camera.  An attempt succeeds when at least
    ``config.min_occluded_per_group`` views have an occlusion ratio inside
    ``config.snr_range``; otherwise it is retried up to ``config.max_retries``
    times, after which the attempt with the smallest mean distance to the
    range is kept and flagged ``occlusion_exhausted``.
    """
    group = sorted(group, key=lambda s: s.camera_id)
    if not group:
        raise OcclusionError("empty group")
    if any(s.shape[2] != 3 for s in group):
        raise ConfigurationError("realistic 3D occlusion needs B = 3 samples")
    if not occluders:
        raise ConfigurationError("empty occluder library")
    ref = group[0]
    for s in group:
        if (ref.camera_id, s.camera_id) not in calibrations:
            raise ConfigurationError(f"missing calibration {(ref.camera_id, s.camera_id)}")
    a, b = config.snr_range
    best = None
    attempts = 0
    for _ in range(config.max_retries + 1):
        placed = None
        for _ in range(config.max_placements):
            model = occluders[int(rng.integers(len(occluders)))]
            verts, _aug = geo.rigid_augment(model.vertices, ref, rng, radius=config.radius)
            views = {s.camera_id: geo.apply_calibration(calibrations[(ref.camera_id, s.camera_id)], verts)
                     for s in group}
            if all(geo.aabb_disjoint(views[s.camera_id], _skeleton_points(s)) for s in group):
                try:
                    masks = [_project_view(s, views[s.camera_id]) for s in group]
                except (ProjectionError, HullError):
                    continue
                placed = model, views, masks
                break
        if placed is None:
            continue
        attempts += 1
        model, views, masks = placed
        occluded = [s.occlude(m) for s, m in zip(group, masks)]
        snrs = [snr_of(s.mask) for s in occluded]
        n_in = sum(a <= r <= b for r in snrs)
        if n_in >= config.min_occluded_per_group:
            return RealisticResult(occluded, snrs, True, attempts, model.name, views)
        gap = float(np.mean([max(a - r, 0.0, r - b) for r in snrs]))
        if best is None or gap < best[0]:
            best = (gap, occluded, snrs, model.name, views)
    if best is None:
        raise OcclusionError("no valid occluder placement found")
    _, occluded, snrs, name, views = best
    occluded = [s.occlude(np.zeros_like(s.mask), occlusion_exhausted=True) for s in occluded]
    return RealisticResult(occluded, snrs, False, attempts, name, views)


def occlude_dataset_3d(samples, calibrations, occluders, config, rng):
    """Apply realistic 3D occlusion group by group; returns (samples, results)
    with samples in their original order."""
    samples = list(samples)
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.group_id, []).append(i)
    out = list(samples)
    results = []
    for gid in sorted(groups):
        idx = sorted(groups[gid], key=lambda i: samples[i].camera_id)
        res = occlude_realistic_3d([samples[i] for i in idx], calibrations, occluders, config, rng)
        for i, s in zip(idx, res.samples):
            out[i] = s
        results.append(res)
    return out, results


def random_projection(sample_2d, rng, depth=(2.0, 5.0)):
    """Random 3x4 camera-to-image matrix scaled to the skeleton's pixel extent."""
    pts = sample_2d.data[~sample_2d.mask].astype(np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float(max(np.max(hi - lo), 1e-6))
    f = rng.uniform(0.5, 2.0) * scale
    c = (lo + hi) / 2 + rng.normal(0.0, 0.25 * scale, size=2)
    yaw = rng.uniform(0.0, 2 * np.pi)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rot = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    t = np.array([rng.normal(0.0, 0.5), rng.uniform(-0.2, 0.8), rng.uniform(*depth)])
    k = np.array([[f, 0.0, c[0]], [0.0, f, c[1]], [0.0, 0.0, 1.0]])
    return k @ np.hstack([rot, t[:, None]])


def project_with(matrix, vertices):
    h = geo.homogeneous(vertices) @ np.asarray(matrix).T
    if np.any(h[:, 2] <= geo.DEPTH_EPS):
        raise ProjectionError("occluder vertex behind the image plane")
    return h[:, :2] / h[:, 2:3]


def occlude_with_hull(sample, hull):
    """Mask every unmasked joint of a 2D sample that lies in ``hull``."""
    valid = ~sample.mask
    cells = hull_mask(hull, sample.data.astype(np.float64), valid)
    out = sample.occlude(cells)
    return out, snr_of(out.mask)


def occlude_realistic_2d(sample, occluder, rng, max_retries=25):
    """Project ``occluder`` with a random camera onto a 2D (pixel) sample.

    Projections are redrawn until the hull's bounding box overlaps the
    skeleton's, or ``max_retries`` is exhausted (the last valid projection is
    then used).  Returns (occluded sample, occlusion ratio).
    """
    if sample.shape[2] != 2:
        raise ConfigurationError("realistic 2D occlusion needs B = 2 samples")
    pts = sample.data[~sample.mask].astype(np.float64)
    if len(pts) == 0:
        return sample, snr_of(sample.mask)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    verts = occluder.vertices - occluder.vertices.mean(axis=0)
    last = None
    for _ in range(max_retries + 1):
        proj = random_projection(sample, rng)
        try:
            hull = geo.convex_hull_2d(project_with(proj, verts))
        except (ProjectionError, HullError):
            continue
        last = hull
        hlo, hhi = hull.vertices.min(axis=0), hull.vertices.max(axis=0)
        if np.all(hhi >= lo) and np.all(hlo <= hi):
            break
    if last is None:
        raise OcclusionError("could not draw a non-degenerate projection")
    return occlude_with_hull(sample, last)


def _count(gamma, total):
    return int(np.floor(gamma * total + 0.5))


def occlude_random(sample, gamma, rng):
    """Blank exactly round(gamma * T * J) distinct cells chosen uniformly."""
    if not 0 < gamma < 1:
        raise ConfigurationError("gamma must lie in (0, 1)")
    t, j = sample.mask.shape
    n = _count(gamma, t * j)
    cells = np.zeros(t * j, dtype=bool)
    cells[rng.choice(t * j, size=n, replace=False)] = True
    return sample.occlude(cells.reshape(t, j))


def occlude_temporal(sample, n_frames, rng):
    t, j = sample.mask.shape
    if not 0 <= n_frames < t:
        raise ConfigurationError(f"n_frames must be in [0, {t})")
    cells = np.zeros((t, j), dtype=bool)
    cells[rng.choice(t, size=n_frames, replace=False)] = True
    return sample.occlude(cells)


def occlude_spatial(sample, n_joints, rng):
    t, j = sample.mask.shape
    if not 0 <= n_joints < j:
        raise ConfigurationError(f"n_joints must be in [0, {j})")
    cells = np.zeros((t, j), dtype=bool)
    for f in range(t):
        cells[f, rng.choice(j, size=n_joints, replace=False)] = True
    return sample.occlude(cells)
