"""Losses, prototype memory bank and the training loop.

Each step runs the main and the auxiliary branch on the same fused patch
embedding and minimizes ``w_tpl * triplet + w_cls * cross-entropy +
w_lsc * (1 - cos(E, E*))``.  The auxiliary branch gates its stage-(N-1)
features with the sample itself (warm-up), with zeros (decenterization) and
finally with the class prototypes kept in the memory bank.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import functional as F
from .autodiff.checkpoint import save_checkpoint
from .encoding import encode_batch
from .errors import ConfigurationError, NumericError, StateError

LOG_FIELDS = ("epoch", "L_TPL", "L_CLS", "L_LSC", "total", "phase", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3.5e-5
    epochs: int = 50
    batch_size: int = 32
    w_tpl: float = 1.0
    w_cls: float = 0.4
    w_lsc: float = 0.1
    margin: float = 0.2
    eps: float = 1e-6
    warmup_epochs: int = 20      # N_t
    decenter_epochs: int = 10
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    hard_mining: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def phase(self, epoch):
        if epoch < self.warmup_epochs:
            return "warmup"
        if epoch < self.warmup_epochs + self.decenter_epochs:
            return "decenter"
        return "prototype"

    def lr_at(self, epoch):
        """Cosine annealing from ``lr`` toward zero over ``epochs``."""
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))


# losses

def pairwise_distance(a, b, eps=1e-6):
    """||a - b + eps||^2 along the last axis (eps added per coordinate)."""
    return ad.sum_(ad.square(a - b + eps), axis=-1)


def triplet_margin_loss(anchors, positives, negatives, margin=0.2, eps=1e-6):
    """Mean of max(D(a, p) - D(a, n) + margin, 0): zero once every negative is
    at least ``margin`` farther from its anchor than the positive."""
    gap = pairwise_distance(anchors, positives, eps) - pairwise_distance(anchors, negatives, eps)
    return ad.mean(ad.maximum(gap + margin, 0.0))


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.intp)
    logp = F.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -ad.mean(picked)


def lsc_loss(e, e_star):
    """Mean over the batch of 1 - cos(E, E*)."""
    return ad.mean(1.0 - F.cosine_similarity(e, e_star, axis=-1))


def mine_triplets(labels, rng, embeddings=None, hard=False):
    """(anchor, positive, negative) index rows.  Every sample with a
    same-class peer and at least one other-class sample yields one triplet;
    positives/negatives are uniform draws, or farthest/closest when ``hard``."""
    labels = np.asarray(labels)
    out = []
    for i, lab in enumerate(labels):
        pos = np.flatnonzero((labels == lab) & (np.arange(len(labels)) != i))
        neg = np.flatnonzero(labels != lab)
        if len(pos) == 0 or len(neg) == 0:
            continue
        if hard and embeddings is not None:
            d = ((embeddings - embeddings[i]) ** 2).sum(axis=1)
            out.append((i, pos[np.argmax(d[pos])], neg[np.argmin(d[neg])]))
        else:
            out.append((i, pos[rng.integers(len(pos))], neg[rng.integers(len(neg))]))
    return np.array(out, dtype=np.intp).reshape(-1, 3)


# prototype memory bank

@dataclass
class PrototypeMemoryBank:
    prototypes: dict = field(default_factory=dict)   # class id -> vector
    counts: dict = field(default_factory=dict)
    epoch: int = -1
    min_read_epoch: int = 0
    reads: list = field(default_factory=list)        # epochs at which lookup happened

    def lookup(self, labels, epoch):
        if epoch < self.min_read_epoch:
            raise StateError(f"prototype bank read at epoch {epoch} < {self.min_read_epoch}")
        missing = sorted({int(l) for l in labels} - set(self.prototypes))
        if missing:
            raise StateError(f"no prototype for classes {missing}")
        self.reads.append(epoch)
        return np.stack([self.prototypes[int(l)] for l in labels])


def class_means(features, labels):
    """Per-class mean of feature rows, accumulated in sample order."""
    labels = np.asarray(labels)
    out, counts = {}, {}
    for c in np.unique(labels):
        rows = features[labels == c]
        out[int(c)] = rows.sum(axis=0) / len(rows)
        counts[int(c)] = len(rows)
    return out, counts


def stage_features(model, streams, batch_size=64):
    """Eval-mode pooled stage-(N-1) features of the main branch."""
    was_training = model.training
    model.eval()
    feats = []
    with ad.no_grad():
        for lo in range(0, len(streams[0]), batch_size):
            out = model.forward_main(*(s[lo:lo + batch_size] for s in streams))
            feats.append(out.pooled.data)
    model.train(was_training)
    return np.concatenate(feats)


def update_prototypes(model, streams, labels, epoch, batch_size=64, bank=None):
    means, counts = class_means(stage_features(model, streams, batch_size), labels)
    bank = bank if bank is not None else PrototypeMemoryBank()
    bank.prototypes, bank.counts, bank.epoch = means, counts, epoch
    return bank


# optimization

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            p.data *= 1.0 - lr * self.wd
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cast_parameters(model, dtype):
    for p in model.parameters():
        if p.data.dtype != dtype:
            p.data = p.data.astype(dtype)


@dataclass
class StepLosses:
    total: object
    tpl: float
    cls: float
    lsc: float


def batch_loss(model, streams, labels, cfg, phase, prototypes, rng):
    out = model.forward_train(*(ad.Tensor(s) for s in streams), prototypes=prototypes, phase=phase)
    trip = mine_triplets(labels, rng, out.embedding.data, hard=cfg.hard_mining)
    if len(trip):
        e = out.embedding
        l_tpl = triplet_margin_loss(ad.take(e, trip[:, 0]), ad.take(e, trip[:, 1]),
                                    ad.take(e, trip[:, 2]), cfg.margin, cfg.eps)
    else:
        l_tpl = ad.Tensor(0.0)
    l_cls = cross_entropy(out.logits, labels)
    l_lsc = lsc_loss(out.embedding, out.aux_embedding)
    total = ad.scale(l_tpl, cfg.w_tpl) + ad.scale(l_cls, cfg.w_cls) + ad.scale(l_lsc, cfg.w_lsc)
    return StepLosses(total, float(l_tpl.data), float(l_cls.data), float(l_lsc.data))


@dataclass
class TrainData:
    streams: tuple       # joints, velocities, bones images (N, H, W, B)
    labels: np.ndarray   # 0..|C_base|-1
    class_ids: tuple     # label index -> dataset class id


def prepare_train_data(samples, topology, model_cfg, dtype=np.float64):
    class_ids = tuple(sorted({s.label for s in samples}))
    index = {c: i for i, c in enumerate(class_ids)}
    h, w = model_cfg.image_size
    streams = encode_batch(samples, topology, h, w, model_cfg.patch_size, dtype=dtype)
    labels = np.array([index[s.label] for s in samples], dtype=np.intp)
    return TrainData(streams, labels, class_ids)


@dataclass
class TrainResult:
    model: object
    log: list
    bank: PrototypeMemoryBank
    class_ids: tuple


def train(model, split, topology, cfg, log_path=None, checkpoint_dir=None, on_epoch_end=None):
    """Optimize ``model`` on ``split.train``; returns a ``TrainResult``.

    ``on_epoch_end(epoch, model, bank, data)`` is called after the prototype
    refresh of every epoch.
    """
    dtype = np.dtype(cfg.dtype).type
    with ad.precision(dtype):
        data = prepare_train_data(split.train, topology, model.config, dtype=dtype)
        if len(data.class_ids) != model.config.num_classes:
            raise ConfigurationError(
                f"model head has {model.config.num_classes} classes, split has {len(data.class_ids)}")
        return _train_loop(model, data, cfg, dtype, log_path, checkpoint_dir, on_epoch_end)


def _train_loop(model, data, cfg, dtype, log_path, checkpoint_dir, on_epoch_end):
    rng = np.random.default_rng(cfg.seed)
    cast_parameters(model, dtype)
    model.set_rng(rng)
    model.train()
    opt = AdamW(model.parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay)
    bank = PrototypeMemoryBank(min_read_epoch=cfg.warmup_epochs)
    n = len(data.labels)
    log = []
    for epoch in range(cfg.epochs):
        phase = cfg.phase(epoch)
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            labels = data.labels[idx]
            protos = bank.lookup(labels, epoch) if phase == "prototype" else None
            step = batch_loss(model, tuple(s[idx] for s in data.streams), labels, cfg, phase, protos, rng)
            value = float(step.total.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    f"tpl={step.tpl} cls={step.cls} lsc={step.lsc}")
            model.zero_grad()
            step.total.backward()
            opt.step(lr)
            sums += (step.tpl, step.cls, step.lsc, value)
            n_batches += 1
        update_prototypes(model, data.streams, data.labels, epoch, bank=bank)
        means = sums / max(n_batches, 1)
        row = {"epoch": epoch, "L_TPL": means[0], "L_CLS": means[1], "L_LSC": means[2],
               "total": means[3], "phase": phase, "lr": lr}
        log.append(row)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, bank, data)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_model(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}", data.class_ids)
    model.eval()
    if log_path:
        write_log(log, log_path)
    if checkpoint_dir:
        save_model(model, checkpoint_dir, data.class_ids)
    return TrainResult(model, log, bank, data.class_ids)


def write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})


def save_model(model, directory, class_ids):
    save_checkpoint(model, directory, extra_meta={
        "model_config": asdict(model.config), "class_ids": [int(c) for c in class_ids]})


def load_model(directory):
    from .autodiff.checkpoint import load_checkpoint, read_meta
    from .model import ModelConfig, SkeletonTransformer

    meta = read_meta(directory)
    cfg = ModelConfig.from_dict(meta["model_config"])
    with ad.precision(np.float32):
        model = SkeletonTransformer(cfg)
    load_checkpoint(model, directory)
    return model.eval(), tuple(meta.get("class_ids", ()))


def load_json_config(cls, path):
    return cls.from_dict(json.loads(Path(path).read_text())) if path else cls()
