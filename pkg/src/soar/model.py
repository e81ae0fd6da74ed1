"""Three-stream attention network: convolutional patch stems, mixed attention
fusion of the joint/velocity/bone embeddings, LeViT-style attention stages,
a main branch and a prototype-augmented auxiliary branch.

All activations are token tensors of shape (batch, tokens, features) with
tokens in row-major order over a square token grid.
"""
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import functional as F
from .autodiff.nn import LayerNorm, Linear, LinearBN, ConvBN, Module, parameter, shape_only
from .errors import ConfigurationError, StateError

PHASES = ("warmup", "decenter", "prototype")


@dataclass(frozen=True)
class ModelConfig:
    key_dim: int = 32
    num_heads: tuple = (6, 9, 12)
    depth: tuple = (4, 4, 4)
    dims: tuple = (384, 512, 768)
    patch_size: int = 16
    image_size: tuple = (224, 224)
    in_channels: int = 3
    embed_dim: int = 256
    num_classes: int = 100
    drop_path: float = 0.0
    attn_ratio: int = 2
    mlp_ratio: int = 2
    down_attn_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("num_heads", "depth", "dims", "image_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.num_heads) == len(self.depth) == len(self.dims) == 3):
            raise ConfigurationError("the network has exactly 3 stages")
        if any(v <= 0 for v in self.num_heads + self.depth + self.dims) or self.key_dim <= 0:
            raise ConfigurationError("stage settings must be positive")
        if list(self.dims) != sorted(self.dims):
            raise ConfigurationError("stage dims must be non-decreasing")
        p = self.patch_size
        if p < 2 or p & (p - 1):
            raise ConfigurationError("patch size must be a power of two >= 2")
        h, w = self.image_size
        if h != w or h % p:
            raise ConfigurationError("image must be square and divisible by the patch size")
        if self.dims[0] % (p // 2):
            raise ConfigurationError("dims[0] must be divisible by patch_size / 2 (stem widths)")
        if not 0 <= self.drop_path < 1:
            raise ConfigurationError("drop_path must lie in [0, 1)")

    @property
    def grid(self):
        return self.image_size[0] // self.patch_size

    def stage_grids(self):
        g = [self.grid]
        for _ in range(2):
            g.append((g[-1] - 1) // 2 + 1)
        return g

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "base": ModelConfig(),
    "small": ModelConfig(key_dim=1, num_heads=(2, 2, 2), depth=(2, 4, 4), dims=(384, 512, 512)),
    # gradient-check scale
    "micro": ModelConfig(key_dim=2, num_heads=(2, 2, 2), depth=(1, 1, 1), dims=(8, 8, 8),
                         patch_size=4, image_size=(16, 16), embed_dim=8, num_classes=3),
    # desk-scale training
    "toy": ModelConfig(key_dim=8, num_heads=(2, 2, 2), depth=(1, 1, 1), dims=(32, 48, 64),
                       patch_size=4, image_size=(32, 32), embed_dim=64, num_classes=6),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset '{name}' (have {sorted(PRESETS)})") from None
    return replace(cfg, **overrides) if overrides else cfg


def _offset_index(grid, q_stride=1):
    """Index into a (heads, grid*grid) bias table by |drow|, |dcol| between
    each query position (subsampled by ``q_stride``) and each key position."""
    keys = [(r, c) for r in range(grid) for c in range(grid)]
    queries = [(r, c) for r in range(0, grid, q_stride) for c in range(0, grid, q_stride)]
    idx = np.empty((len(queries), len(keys)), dtype=np.intp)
    for a, (qr, qc) in enumerate(queries):
        for b, (kr, kc) in enumerate(keys):
            idx[a, b] = abs(qr - kr) * grid + abs(qc - kc)
    return idx


def _split_heads(x, heads, dim):
    b, n, _ = x.shape
    return x.reshape(b, n, heads, dim).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


class Residual(Module):
    def __init__(self, block, drop_rate):
        self.block = block
        self.drop_rate = drop_rate
        self.rng = None

    def forward(self, x):
        return x + F.drop_path(self.block(x), self.drop_rate, self.training, self.rng)


class MLP(Module):
    def __init__(self, dim, ratio, rng, std):
        self.fc1 = LinearBN(dim, dim * ratio, rng, std)
        self.fc2 = LinearBN(dim * ratio, dim, rng, std, bn_gain=0.0)

    def forward(self, x):
        return self.fc2(F.hardswish(self.fc1(x)))


class Attention(Module):
    """Multi-head attention with a learned positional bias:
    ``Proj_Top(hardswish((softmax(Q K^T / sqrt(D)) + bias) V))``."""

    def __init__(self, dim, key_dim, heads, attn_ratio, grid, rng, std):
        self.heads, self.key_dim = heads, key_dim
        self.value_dim = attn_ratio * key_dim
        self.q = LinearBN(dim, heads * key_dim, rng, std)
        self.k = LinearBN(dim, heads * key_dim, rng, std)
        self.v = LinearBN(dim, heads * self.value_dim, rng, std)
        self.proj = LinearBN(heads * self.value_dim, dim, rng, std, bn_gain=0.0)
        self.bias = parameter(np.zeros((heads, grid * grid)))
        self.index = _offset_index(grid)

    def attention_weights(self, x):
        q = _split_heads(self.q(x), self.heads, self.key_dim)
        k = _split_heads(self.k(x), self.heads, self.key_dim)
        scores = F.softmax(ad.scale(q @ k.transpose(0, 1, 3, 2), self.key_dim ** -0.5), axis=-1)
        return scores, scores + self.bias[:, self.index]

    def forward(self, x):
        _, weights = self.attention_weights(x)
        v = _split_heads(self.v(x), self.heads, self.value_dim)
        return self.proj(F.hardswish(_merge_heads(weights @ v)))


class AttentionSubsample(Module):
    """Stage transition: queries from every second token row/column, keys and
    values from all tokens, output widened to the next stage's dim."""

    def __init__(self, dim_in, dim_out, key_dim, heads, attn_ratio, grid, rng, std):
        self.heads, self.key_dim = heads, key_dim
        self.value_dim = attn_ratio * key_dim
        self.grid = grid
        self.q = LinearBN(dim_in, heads * key_dim, rng, std)
        self.k = LinearBN(dim_in, heads * key_dim, rng, std)
        self.v = LinearBN(dim_in, heads * self.value_dim, rng, std)
        self.proj = LinearBN(heads * self.value_dim, dim_out, rng, std)
        self.bias = parameter(np.zeros((heads, grid * grid)))
        self.index = _offset_index(grid, q_stride=2)
        rows = np.arange(grid * grid).reshape(grid, grid)
        self.query_tokens = rows[::2, ::2].reshape(-1)

    def forward(self, x):
        xq = ad.take(x, self.query_tokens, axis=1)
        q = _split_heads(self.q(xq), self.heads, self.key_dim)
        k = _split_heads(self.k(x), self.heads, self.key_dim)
        v = _split_heads(self.v(x), self.heads, self.value_dim)
        scores = F.softmax(ad.scale(q @ k.transpose(0, 1, 3, 2), self.key_dim ** -0.5), axis=-1)
        weights = scores + self.bias[:, self.index]
        return self.proj(F.hardswish(_merge_heads(weights @ v)))


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


def build_stages(cfg, rng):
    """Three stages; stages 2 and 3 open with a subsampling attention block."""
    grids = cfg.stage_grids()
    stages = []
    for i in range(3):
        blocks = []
        d = cfg.dims[i]
        if i > 0:
            d_in = cfg.dims[i - 1]
            blocks.append(AttentionSubsample(d_in, d, cfg.key_dim, max(d_in // cfg.key_dim, 1),
                                             cfg.down_attn_ratio, grids[i - 1], rng, cfg.init_std))
            blocks.append(Residual(MLP(d, cfg.mlp_ratio, rng, cfg.init_std), cfg.drop_path))
        for _ in range(cfg.depth[i]):
            blocks.append(Residual(Attention(d, cfg.key_dim, cfg.num_heads[i], cfg.attn_ratio,
                                             grids[i], rng, cfg.init_std), cfg.drop_path))
            blocks.append(Residual(MLP(d, cfg.mlp_ratio, rng, cfg.init_std), cfg.drop_path))
        stages.append(Stage(blocks))
    return stages


class PatchStem(Module):
    """log2(P) stride-2 3x3 conv + batch-norm layers with hardswish between,
    widening to dims[0]; the output grid is flattened to tokens."""

    def __init__(self, cfg, rng):
        n_layers = int(math.log2(cfg.patch_size))
        widths = [cfg.dims[0] // 2 ** (n_layers - 1 - i) for i in range(n_layers)]
        chans = [cfg.in_channels] + widths
        self.layers = [ConvBN(chans[i], chans[i + 1], rng, std=cfg.init_std * 5)
                       for i in range(n_layers)]

    def forward(self, img):
        x = img
        for i, layer in enumerate(self.layers):
            if i:
                x = F.hardswish(x)
            x = layer(x)
        return F.flatten_tokens(x)


def sca(a_jv, a_bj):
    """Softmax-gated symmetric merge of two branch tensors (same shape):
    (softmax(a_jv) * a_bj + softmax(a_bj) * a_jv) / 2, softmax over features."""
    left = F.softmax(a_jv, axis=-1) * a_bj
    right = F.softmax(a_bj, axis=-1) * a_jv
    return ad.scale(left + right, 0.5)


class MixedFusion(Module):
    """Queries from the joint stream, keys/values from joint+velocity and
    joint+bone concatenations, merged with ``sca`` and attended."""

    def __init__(self, dim, rng, std):
        self.dim = dim
        self.q_jv = Linear(dim, dim, rng, std)
        self.q_bj = Linear(dim, dim, rng, std)
        self.k_jv = Linear(2 * dim, dim, rng, std)
        self.v_jv = Linear(2 * dim, dim, rng, std)
        self.k_bj = Linear(2 * dim, dim, rng, std)
        self.v_bj = Linear(2 * dim, dim, rng, std)
        self.out = Linear(dim, dim, rng, zero=True)

    def merged_qkv(self, e_j, e_v, e_b):
        cat_jv = ad.concat([e_j, e_v], axis=-1)
        cat_bj = ad.concat([e_j, e_b], axis=-1)
        q = sca(self.q_jv(e_j), self.q_bj(e_j))
        k = sca(self.k_jv(cat_jv), self.k_bj(cat_bj))
        v = sca(self.v_jv(cat_jv), self.v_bj(cat_bj))
        return q, k, v

    def forward(self, e_j, e_v, e_b):
        if not (e_j.shape == e_v.shape == e_b.shape):
            raise ConfigurationError(f"stream shapes differ: {e_j.shape}, {e_v.shape}, {e_b.shape}")
        q, k, v = self.merged_qkv(e_j, e_v, e_b)
        att = F.softmax(ad.scale(q @ k.transpose(0, 2, 1), self.dim ** -0.5), axis=-1) @ v
        return self.out(att)


class MAFM(Module):
    """E_att = MF(LN(E_j), LN(E_v), LN(E_b));
    E_asn = mean(E_j, E_v, E_b) + DP(E_att);
    E_mixed = DP(MLP(LN(E_asn))) + E_asn."""

    def __init__(self, dim, mlp_ratio, drop_rate, rng, std):
        self.ln_j, self.ln_v, self.ln_b = LayerNorm(dim), LayerNorm(dim), LayerNorm(dim)
        self.mf = MixedFusion(dim, rng, std)
        self.ln_asn = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, std)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, zero=True)
        self.drop_rate = drop_rate
        self.rng = None

    def forward(self, e_j, e_v, e_b):
        e_att = self.mf(self.ln_j(e_j), self.ln_v(e_v), self.ln_b(e_b))
        avg = (e_j + e_v + e_b) / 3.0
        e_asn = avg + F.drop_path(e_att, self.drop_rate, self.training, self.rng)
        mlp = self.fc2(F.hardswish(self.fc1(self.ln_asn(e_asn))))
        return F.drop_path(mlp, self.drop_rate, self.training, self.rng) + e_asn


class PrototypeAugment(Module):
    """Feature-level augmentation of per-token features X (B, N, d) with one
    gating vector p (B, d) per sample:

        E_r = g2(softmax(p) * X),  E_l = g1(X)
        W = softmax(E_l E_r^T / sqrt(d)) over tokens
        out = relu(X + g3([W E_r, E_l]))
    """

    def __init__(self, dim, rng, std):
        self.dim = dim
        self.g1 = Linear(dim, dim, rng, std)
        self.g2 = Linear(dim, dim, rng, std)
        self.g3_fc1 = Linear(2 * dim, dim, rng, std)
        self.g3_fc2 = Linear(dim, dim, rng, zero=True)

    def forward(self, x, prototypes):
        b, n, d = x.shape
        gate = F.softmax(prototypes, axis=-1).reshape(b, 1, d)
        e_r = self.g2(gate * x)
        e_l = self.g1(x)
        w = F.softmax(ad.scale(e_l @ e_r.transpose(0, 2, 1), d ** -0.5), axis=-1)
        agg = self.g3_fc2(ad.relu(self.g3_fc1(ad.concat([w @ e_r, e_l], axis=-1))))
        return ad.relu(x + agg)


class Embedding(Module):
    def __init__(self, dim_in, dim_out, rng, std):
        self.fc1 = Linear(dim_in, dim_out, rng, std)
        self.fc2 = Linear(dim_out, dim_out, rng, std)

    def forward(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


@dataclass
class Outputs:
    stage_tokens: object   # main branch tokens after stage N-1
    pooled: object         # token mean of stage_tokens (prototype space)
    embedding: object      # E
    logits: object
    aux_embedding: object = None  # E*
    extras: dict = field(default_factory=dict)


class SkeletonTransformer(Module):
    def __init__(self, cfg, seed=0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        std = cfg.init_std
        self.stem_j = PatchStem(cfg, rng)
        self.stem_v = PatchStem(cfg, rng)
        self.stem_b = PatchStem(cfg, rng)
        self.mafm = MAFM(cfg.dims[0], cfg.mlp_ratio, cfg.drop_path, rng, std)
        self.main = build_stages(cfg, rng)
        self.aux = build_stages(cfg, rng)
        self.augment = PrototypeAugment(cfg.dims[1], rng, std)
        self.emb = Embedding(cfg.dims[2], cfg.embed_dim, rng, std)
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng, std)

    def set_rng(self, rng):
        """Generator used by drop-path in training mode."""
        for mod in _walk(self):
            if isinstance(mod, (Residual, MAFM)):
                mod.rng = rng

    def inference_modules(self):
        return [self.stem_j, self.stem_v, self.stem_b, self.mafm, *self.main, self.emb, self.head]

    # forward pieces

    def patch_embed(self, joints, vel, bones):
        return self.stem_j(joints), self.stem_v(vel), self.stem_b(bones)

    def fuse(self, joints, vel, bones):
        return self.mafm(*self.patch_embed(joints, vel, bones))

    @staticmethod
    def _run(stages, x):
        for st in stages:
            x = st(x)
        return x

    def embed_tokens(self, tokens):
        return self.emb(ad.mean(tokens, axis=1))

    def forward_main(self, joints, vel, bones):
        e_patch = self.fuse(joints, vel, bones)
        return self._main_from_patch(e_patch)

    def _main_from_patch(self, e_patch):
        tokens = self._run(self.main[:2], e_patch)
        e = self.embed_tokens(self.main[2](tokens))
        return Outputs(tokens, ad.mean(tokens, axis=1), e, self.head(e))

    def forward_aux(self, e_patch, prototypes, phase):
        """Auxiliary branch.  ``prototypes`` (B, d') is required in the
        prototype phase and ignored otherwise."""
        tokens = self._run(self.aux[:2], e_patch)
        b, _, d = tokens.shape
        if phase == "warmup":
            gate = ad.mean(tokens, axis=1)
        elif phase == "decenter":
            gate = ad.Tensor(np.zeros((b, d)))
        elif phase == "prototype":
            if prototypes is None:
                raise StateError("prototype phase needs prototypes")
            gate = ad.as_tensor(prototypes)
        else:
            raise ConfigurationError(f"unknown phase '{phase}'")
        aug = self.augment(tokens, gate)
        return self.embed_tokens(self.aux[2](aug))

    def forward_train(self, joints, vel, bones, prototypes=None, phase="warmup"):
        e_patch = self.fuse(joints, vel, bones)
        out = self._main_from_patch(e_patch)
        out.aux_embedding = self.forward_aux(e_patch, prototypes, phase)
        return out


def _walk(module):
    yield module
    for _, child in module.children():
        yield from _walk(child)


def param_count(cfg, include_auxiliary=False):
    """Learned scalars of the inference network (stems, fusion, main branch,
    embedding, head); ``include_auxiliary`` adds the training-only auxiliary
    branch and its augmentation layers."""
    with shape_only(), ad.precision(np.float32):
        net = SkeletonTransformer(cfg)
    if include_auxiliary:
        return net.num_parameters()
    return sum(m.num_parameters() for m in net.inference_modules())
