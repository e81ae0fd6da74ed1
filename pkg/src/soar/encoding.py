"""Joint / velocity / bone streams and their image-like resampling."""
from dataclasses import dataclass

import numpy as np


def velocities(seq):
    """Frame differences with the first frame set to zero."""
    s = np.asarray(getattr(seq, "data", seq), dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    v = np.zeros_like(s)
    v[1:] = s[1:] - s[:-1]
    return v


def bones(seq, topology):
    """One vector per topology edge ``(i, j)``: s_i - s_j, in edge order."""
    s = np.asarray(getattr(seq, "data", seq), dtype=np.float64)
    idx = np.array(topology.bones, dtype=np.intp).reshape(-1, 2)
    return s[:, idx[:, 0]] - s[:, idx[:, 1]]


def interp_matrix(n_out, n_in):
    """(n_out x n_in) linear-interpolation weights, corner-aligned sampling."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def to_image(stream, height, width):
    """Bilinear resampling of a (T x K x B) stream onto an (H x W x B) grid."""
    x = np.asarray(stream, dtype=np.float64)
    rows = interp_matrix(height, x.shape[0])
    cols = interp_matrix(width, x.shape[1])
    return np.einsum("ht,tkb,wk->hwb", rows, x, cols)


def to_patches(image, patch):
    """Non-overlapping row-major patches, each flattened to P*P*B values."""
    h, w, b = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    g = image.reshape(h // patch, patch, w // patch, patch, b).transpose(0, 2, 1, 3, 4)
    return g.reshape(-1, patch * patch * b)


def from_patches(patches, height, width, patch):
    b = patches.shape[1] // (patch * patch)
    g = patches.reshape(height // patch, width // patch, patch, patch, b).transpose(0, 2, 1, 3, 4)
    return g.reshape(height, width, b)


@dataclass(frozen=True, eq=False)
class EncodedSample:
    joints_img: np.ndarray
    velocities_img: np.ndarray
    bones_img: np.ndarray
    patch: int

    def __post_init__(self):
        shapes = {self.joints_img.shape, self.velocities_img.shape, self.bones_img.shape}
        if len(shapes) != 1:
            raise ValueError(f"stream images disagree in shape: {shapes}")
        h, w, _ = self.joints_img.shape
        if h % self.patch or w % self.patch:
            raise ValueError("image size must be a multiple of the patch size")

    @property
    def streams(self):
        return self.joints_img, self.velocities_img, self.bones_img


def encode(seq, topology, height=64, width=64, patch=8):
    data = seq.data if hasattr(seq, "data") else np.asarray(seq)
    return EncodedSample(
        to_image(data, height, width),
        to_image(velocities(data), height, width),
        to_image(bones(data, topology), height, width),
        patch,
    )


def encode_batch(samples, topology, height, width, patch, dtype=np.float64):
    """Stack encoded streams as three (N, H, W, B) arrays."""
    enc = [encode(s, topology, height, width, patch) for s in samples]
    return tuple(np.stack([e.streams[k] for e in enc]).astype(dtype) for k in range(3))
