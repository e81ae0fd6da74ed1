"""Skeleton samples, a parametric motion generator and the on-disk dataset format.

Coordinates live in each camera's frame: axis 0 points right, axis 1 is
vertical (up), axis 2 is the camera's focus axis (depth, positive in front).
"""
import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigurationError, DatasetFormatError, SplitError

VERTICAL_AXIS = 1
FORMAT_VERSION = 1
MAGIC = b"SOAR"

# (n_base, n_novel) per benchmark protocol
SPLIT_PRESETS = {
    "ntu120": (100, 20),
    "ntu60": (48, 12),
    "toyota": (24, 7),
}


def _frozen(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    data: np.ndarray  # (T, J, B) float32
    mask: np.ndarray  # (T, J) bool, True = occluded
    label: int
    camera_id: int = 0
    group_id: int = 0
    subject_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        mask = np.array(self.mask, dtype=bool)
        if data.ndim != 3:
            raise ConfigurationError(f"data must be T x J x B, got shape {data.shape}")
        t, j, b = data.shape
        if t < 2 or j < 2 or b not in (2, 3):
            raise ConfigurationError(f"invalid sample shape {data.shape}")
        if mask.shape != (t, j):
            raise ConfigurationError(f"mask shape {mask.shape} does not match data {data.shape}")
        if np.any(data[mask] != 0):
            raise DatasetFormatError("masked cells must hold exact zeros")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def shape(self):
        return self.data.shape

    def occlude(self, cells, **meta):
        """Return a copy with ``cells`` (T x J bool) added to the mask and zeroed."""
        cells = np.asarray(cells, dtype=bool)
        mask = self.mask | cells
        data = self.data.copy()
        data[mask] = 0.0
        return replace(self, data=data, mask=mask, meta={**self.meta, **meta})

    def with_data(self, data):
        """Replace coordinates (masked cells are forced back to zero)."""
        data = np.array(data, dtype=np.float32)
        data[self.mask] = 0.0
        return replace(self, data=data)

    def same_content(self, other):
        return (
            self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.mask, other.mask)
            and (self.label, self.camera_id, self.group_id, self.subject_id)
            == (other.label, other.camera_id, other.group_id, other.subject_id)
        )


@dataclass(frozen=True)
class SkeletonTopology:
    joint_count: int
    bones: tuple  # ((child, parent), ...)

    def __post_init__(self):
        bones = tuple((int(i), int(j)) for i, j in self.bones)
        object.__setattr__(self, "bones", bones)
        n = self.joint_count
        if len(bones) != n - 1:
            raise ConfigurationError(f"a tree over {n} joints needs {n - 1} bones, got {len(bones)}")
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in bones:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ConfigurationError(f"invalid bone {(i, j)}")
            ri, rj = find(i), find(j)
            if ri == rj:
                raise ConfigurationError("bone graph contains a cycle")
            parent[ri] = rj

    def parents(self):
        """child -> parent map (root has no entry)."""
        return {i: j for i, j in self.bones}


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    topology: SkeletonTopology
    class_names: tuple
    n_cameras: int = 1
    camera_transforms: tuple = None  # world -> camera, one 4x4 per camera

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.camera_transforms is not None:
            object.__setattr__(
                self, "camera_transforms",
                tuple(_frozen(np.array(m, dtype=np.float64)) for m in self.camera_transforms),
            )
        shapes = {s.shape for s in self.samples}
        if len(shapes) > 1:
            raise DatasetFormatError(f"inconsistent sample shapes {shapes}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def sample_shape(self):
        return self.samples[0].shape if self.samples else None

    def with_samples(self, samples):
        return replace(self, samples=tuple(samples))

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def by_class(self):
        out = {}
        for i, s in enumerate(self.samples):
            out.setdefault(s.label, []).append(i)
        return out

    def groups(self):
        out = {}
        for s in self.samples:
            out.setdefault(s.group_id, []).append(s)
        return out


@dataclass(frozen=True)
class OneShotSplit:
    base_classes: frozenset
    novel_classes: frozenset
    train: tuple
    support: tuple
    test: tuple

    def __post_init__(self):
        if self.base_classes & self.novel_classes:
            raise SplitError("base and novel classes overlap")
        if sorted(s.label for s in self.support) != sorted(self.novel_classes):
            raise SplitError("support must hold exactly one sample per novel class")
        ids = [id(s) for s in self.train + self.support + self.test]
        if len(ids) != len(set(ids)):
            raise SplitError("a sample appears in more than one partition")


def stick_figure(n_joints):
    """Tree topology and rest pose (meters, y up) for ``n_joints`` >= 5.

    Joints 0-2 are pelvis, chest and head; the remaining joints are dealt
    round-robin to left arm, right arm, left leg and right leg chains.
    """
    if n_joints < 5:
        raise ConfigurationError("stick figure needs at least 5 joints")
    pose = [(0.0, 1.0, 0.0), (0.0, 1.4, 0.0), (0.0, 1.7, 0.0)]
    bones = [(1, 0), (2, 1)]
    counts = [0, 0, 0, 0]
    for k in range(n_joints - 3):
        counts[k % 4] += 1
    for chain, n in enumerate(counts):
        side = -1.0 if chain % 2 == 0 else 1.0
        is_leg = chain >= 2
        prev = 0 if is_leg else 1
        for step in range(n):
            if is_leg:
                x = side * 0.1
                y = 1.0 - 1.0 * (step + 1) / n
            else:
                x = side * (0.2 + 0.12 * step)
                y = 1.4 - 0.6 * (step + 1) / n
            pose.append((x, y, 0.0))
            bones.append((len(pose) - 1, prev))
            prev = len(pose) - 1
    return SkeletonTopology(n_joints, tuple(bones)), np.array(pose)


def camera_rig(n_cameras, distance=3.5, spread_deg=45.0):
    """World -> camera transforms for cameras on an arc facing the origin."""
    if n_cameras == 1:
        yaws = [0.0]
    else:
        yaws = np.deg2rad(np.linspace(-spread_deg, spread_deg, n_cameras))
    mats = []
    for yaw in yaws:
        fwd = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        right = np.cross([0.0, 1.0, 0.0], fwd)
        rot = np.stack([right, [0.0, 1.0, 0.0], fwd])
        center = -distance * fwd
        m = np.eye(4)
        m[:3, :3] = rot
        m[:3, 3] = -rot @ center
        mats.append(m)
    return mats


def _transform(mat, pts):
    return pts @ mat[:3, :3].T + mat[:3, 3]


def synth_dataset(n_classes, samples_per_class, n_cameras, n_frames, n_joints, seed,
                  jitter=0.01):
    """Generate ``n_classes * samples_per_class * n_cameras`` sequences.

    Each class animates the rest pose with per-joint sinusoids whose base
    frequency comes from a class grid, concentrating motion on a random
    subset of limbs; each motion instance gets its own
    subject scale, placement, heading, amplitude and phase jitter, and is then
    rendered into every camera of the rig under a shared ``group_id``.
    """
    if n_classes < 2 or samples_per_class < 1 or n_cameras < 1:
        raise ConfigurationError("need n_classes >= 2, samples_per_class >= 1, n_cameras >= 1")
    if n_frames < 2 or n_joints < 5:
        raise ConfigurationError("need n_frames >= 2 and n_joints >= 5")
    rng = np.random.default_rng(seed)
    topology, rest = stick_figure(n_joints)
    cams = camera_rig(n_cameras)
    chain = np.zeros(n_joints, dtype=int)   # 0 trunk, 1..4 limb chains
    counts = [(n_joints - 3 - k + 3) // 4 for k in range(4)]
    chain[3:] = np.repeat(np.arange(1, 5), counts)

    classes = []
    for c in range(n_classes):
        freq = 0.75 + 0.5 * c
        # each class drives a random non-empty subset of limbs
        active = rng.random(4) < 0.5
        if not active.any():
            active[rng.integers(4)] = True
        weight = np.where(chain == 0, 0.35, np.where(active[chain - 1], 1.0, 0.2))
        amp = rng.uniform(0.0, 0.25, size=(n_joints, 3)) * weight[:, None]
        amp[:, VERTICAL_AXIS] *= 0.6
        phase = rng.uniform(0.0, 2 * np.pi, size=(n_joints, 3))
        drift = rng.normal(0.0, 0.15, size=3) * np.array([1.0, 0.0, 1.0])
        classes.append((freq, amp, phase, drift))

    t = np.arange(n_frames)[:, None, None] / n_frames
    samples = []
    group = 0
    for c, (freq, amp, phase, drift) in enumerate(classes):
        for _ in range(samples_per_class):
            scale = rng.uniform(0.9, 1.1)
            heading = rng.uniform(-0.3, 0.3)
            offset = np.array([rng.uniform(-0.3, 0.3), 0.0, rng.uniform(-0.3, 0.3)])
            a = amp * rng.uniform(0.85, 1.15, size=amp.shape)
            ph = phase + rng.normal(0.0, 0.3, size=phase.shape)
            f = freq * rng.uniform(0.95, 1.05)
            motion = rest[None] * scale + a[None] * np.sin(2 * np.pi * f * t + ph[None])
            motion = motion + drift * t
            motion += rng.normal(0.0, jitter, size=motion.shape)
            ch, sh = np.cos(heading), np.sin(heading)
            yaw = np.array([[ch, 0.0, sh], [0.0, 1.0, 0.0], [-sh, 0.0, ch]])
            world = motion @ yaw.T + offset
            subject = int(rng.integers(0, 40))
            for k, cam in enumerate(cams):
                samples.append(SkeletonSequence(
                    data=_transform(cam, world.reshape(-1, 3)).reshape(world.shape),
                    mask=np.zeros((n_frames, n_joints), dtype=bool),
                    label=c, camera_id=k, group_id=group, subject_id=subject,
                ))
            group += 1
    return Dataset(
        samples=tuple(samples), topology=topology,
        class_names=tuple(f"action_{c:03d}" for c in range(n_classes)),
        n_cameras=n_cameras, camera_transforms=tuple(cams),
    )


def preset_class_ids(name):
    """(base ids, novel ids) with the class counts of a benchmark protocol."""
    n_base, n_novel = SPLIT_PRESETS[name]
    return list(range(n_base)), list(range(n_base, n_base + n_novel))


def make_one_shot_split(dataset, base_class_ids, novel_class_ids, seed):
    base, novel = frozenset(base_class_ids), frozenset(novel_class_ids)
    if base & novel:
        raise SplitError(f"classes {sorted(base & novel)} are both base and novel")
    members = {c: [] for c in base | novel}
    for s in dataset.samples:
        if s.label in members:
            members[s.label].append(s)
    for c in sorted(novel):
        if len(members[c]) < 2:
            raise SplitError(f"novel class {c} needs at least 2 samples, has {len(members[c])}")
    for c in sorted(base):
        if not members[c]:
            raise SplitError(f"base class {c} has no samples")
    rng = np.random.default_rng(seed)
    support, test = [], []
    for c in sorted(novel):
        pick = int(rng.integers(len(members[c])))
        support.append(members[c][pick])
        test.extend(s for i, s in enumerate(members[c]) if i != pick)
    train = [s for s in dataset.samples if s.label in base]
    return OneShotSplit(base, novel, tuple(train), tuple(support), tuple(test))


# serialization

_REC_HEAD = struct.Struct("<4I")


def _record_size(t, j, b):
    return _REC_HEAD.size + 4 * t * j * b + (t * j + 7) // 8 + 4


def _encode_record(s):
    body = (
        _REC_HEAD.pack(s.label, s.camera_id, s.group_id, s.subject_id)
        + s.data.astype("<f4").tobytes()
        + np.packbits(s.mask.reshape(-1), bitorder="little").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shape = dataset.sample_shape or (0, dataset.topology.joint_count, 3)
    meta = {
        "format_version": FORMAT_VERSION,
        "T": shape[0], "J": shape[1], "B": shape[2],
        "topology": {"joint_count": dataset.topology.joint_count,
                     "bones": [list(b) for b in dataset.topology.bones]},
        "class_names": list(dataset.class_names),
        "n_cameras": dataset.n_cameras,
        "camera_transforms": None if dataset.camera_transforms is None
        else [m.tolist() for m in dataset.camera_transforms],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    with open(path / "samples.bin", "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(dataset.samples)))
        for s in dataset.samples:
            fh.write(_encode_record(s))


def load_dataset(path):
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        t, j, b = int(meta["T"]), int(meta["J"]), int(meta["B"])
        topo = SkeletonTopology(meta["topology"]["joint_count"], meta["topology"]["bones"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DatasetFormatError(f"bad meta.json: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {meta.get('format_version')}")
    if topo.joint_count != j:
        raise DatasetFormatError("topology joint count disagrees with J")
    raw = (path / "samples.bin").read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DatasetFormatError("samples.bin: bad magic header")
    (count,) = struct.unpack_from("<I", raw, 4)
    rec = _record_size(t, j, b)
    n_mask = (t * j + 7) // 8
    samples, off = [], 8
    for i in range(count):
        if off + rec > len(raw):
            raise ChecksumError(f"record {i} truncated")
        body = raw[off:off + rec - 4]
        (crc,) = struct.unpack_from("<I", raw, off + rec - 4)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"record {i} checksum mismatch")
        label, cam, grp, subj = _REC_HEAD.unpack_from(body, 0)
        data = np.frombuffer(body, dtype="<f4", count=t * j * b, offset=_REC_HEAD.size)
        bits = np.frombuffer(body, dtype=np.uint8, count=n_mask, offset=_REC_HEAD.size + 4 * t * j * b)
        mask = np.unpackbits(bits, bitorder="little")[: t * j].astype(bool).reshape(t, j)
        data = data.reshape(t, j, b)
        if np.any(data[mask] != 0):
            raise DatasetFormatError(f"record {i}: masked cells are not zero")
        samples.append(SkeletonSequence(data=data, mask=mask, label=label, camera_id=cam,
                                        group_id=grp, subject_id=subj))
        off += rec
    if off != len(raw):
        raise DatasetFormatError("samples.bin: trailing bytes after last record")
    cams = meta.get("camera_transforms")
    return Dataset(samples=tuple(samples), topology=topo, class_names=tuple(meta["class_names"]),
                   n_cameras=int(meta["n_cameras"]),
                   camera_transforms=None if cams is None else tuple(np.array(m) for m in cams))
