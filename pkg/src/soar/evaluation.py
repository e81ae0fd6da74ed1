"""One-shot evaluation: support matching, metrics and robustness sweeps."""
import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import occlusion as occ
from .encoding import encode_batch
from .errors import ConfigurationError

METRIC_FIELDS = ("condition", "accuracy", "f1", "precision", "recall", "n_test")


def embed(model, samples, topology, batch_size=64, dtype=None):
    """Eval-mode embeddings E, one row per sample."""
    cfg = model.config
    dtype = dtype or model.parameters()[0].data.dtype.type
    h, w = cfg.image_size
    streams = encode_batch(samples, topology, h, w, cfg.patch_size, dtype=dtype)
    was_training = model.training
    model.eval()
    out = []
    with ad.precision(dtype), ad.no_grad():
        for lo in range(0, len(samples), batch_size):
            res = model.forward_main(*(s[lo:lo + batch_size] for s in streams))
            out.append(res.embedding.data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, cfg.embed_dim))


def _normalize(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def classify_one_shot(test_emb, support_emb, support_labels, metric="cosine"):
    """Nearest support per test row; ties go to the lowest class id."""
    support_labels = np.asarray(support_labels)
    order = np.argsort(support_labels, kind="stable")
    sup = np.asarray(support_emb, dtype=np.float64)[order]
    lab = support_labels[order]
    test = np.atleast_2d(np.asarray(test_emb, dtype=np.float64))
    if metric == "cosine":
        score = _normalize(test) @ _normalize(sup).T
    elif metric == "euclidean":
        score = -((test[:, None, :] - sup[None, :, :]) ** 2).sum(axis=2)
    else:
        raise ConfigurationError(f"unknown metric '{metric}'")
    return lab[np.argmax(score, axis=1)]


def metrics(predictions, labels, classes=None):
    """Accuracy plus macro F1 / precision / recall over ``classes``
    (default: the classes present in ``labels``)."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if len(pred) != len(true) or len(true) == 0:
        raise ValueError("predictions and labels must be non-empty and equal length")
    classes = np.unique(true) if classes is None else np.asarray(classes)
    prec, rec, f1 = [], [], []
    for c in classes:
        tp = np.sum((pred == c) & (true == c))
        n_pred = np.sum(pred == c)
        n_true = np.sum(true == c)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return {"accuracy": float(np.mean(pred == true)), "f1": float(np.mean(f1)),
            "precision": float(np.mean(prec)), "recall": float(np.mean(rec))}


@dataclass
class Evaluation:
    metrics: dict
    predictions: np.ndarray
    labels: np.ndarray


def evaluate(model, support, test, topology, metric="cosine"):
    sup_emb = embed(model, support, topology)
    test_emb = embed(model, test, topology)
    sup_labels = np.array([s.label for s in support])
    labels = np.array([s.label for s in test])
    pred = classify_one_shot(test_emb, sup_emb, sup_labels, metric)
    return Evaluation(metrics(pred, labels, classes=np.unique(sup_labels)), pred, labels)


def add_gaussian_noise(sample, sigma, mu, rng):
    """Noise on visible coordinates only; occluded cells stay zero."""
    noise = rng.normal(mu, sigma, size=sample.data.shape) * ~sample.mask[..., None]
    return sample.with_data(sample.data + noise.astype(sample.data.dtype))


def gaussian_noise_eval(model, split, topology, sigma, mu=0.0, seed=0, noisy_support=False):
    rng = np.random.default_rng(seed)
    test = [add_gaussian_noise(s, sigma, mu, rng) for s in split.test]
    support = [add_gaussian_noise(s, sigma, mu, rng) for s in split.support] if noisy_support \
        else list(split.support)
    return evaluate(model, support, test, topology).metrics


# occlusion operators for sweeps: name -> fn(samples, rng, **params) -> samples

def _op_none(samples, rng, **_):
    return list(samples)


def _op_random(samples, rng, gamma=0.1, **_):
    return [occ.occlude_random(s, gamma, rng) for s in samples]


def _op_temporal(samples, rng, frames=10, **_):
    return [occ.occlude_temporal(s, frames, rng) for s in samples]


def _op_spatial(samples, rng, joints=5, **_):
    return [occ.occlude_spatial(s, joints, rng) for s in samples]


def _op_re3d(samples, rng, snr_min=0.05, snr_max=0.2, calibrations=None, occluders=None, **_):
    if calibrations is None:
        raise ConfigurationError("re3d needs camera calibrations")
    cfg = occ.OcclusionConfig(snr_range=(snr_min, snr_max))
    out, _ = occ.occlude_dataset_3d(samples, calibrations, occluders or occ.default_library(), cfg, rng)
    return out


def _op_re2d(samples, rng, occluders=None, **_):
    lib = occluders or occ.default_library()
    return [occ.occlude_realistic_2d(s, lib[rng.integers(len(lib))], rng)[0] for s in samples]


OPERATORS = {"none": _op_none, "random": _op_random, "temporal": _op_temporal,
             "spatial": _op_spatial, "re3d": _op_re3d, "re2d": _op_re2d}


def condition_name(cell):
    params = ",".join(f"{k}={v}" for k, v in sorted(cell.items()) if k != "mode")
    return cell["mode"] + (f"({params})" if params else "")


def occlusion_sweep(model, split, topology, grid, seed=0, occval=False, calibrations=None,
                    occluders=None, metric="cosine"):
    """One metrics row per grid cell ``{"mode": ..., **params}``; the operator
    is applied to the test set and, with ``occval``, to the support set."""
    rows = []
    for cell in grid:
        mode = cell.get("mode")
        if mode not in OPERATORS:
            raise ConfigurationError(f"unknown occlusion mode '{mode}'")
        op = OPERATORS[mode]
        params = {k: v for k, v in cell.items() if k != "mode"}
        rng = np.random.default_rng(seed)
        extra = {"calibrations": calibrations, "occluders": occluders}
        test = op(split.test, rng, **params, **extra)
        support = op(split.support, rng, **params, **extra) if occval else list(split.support)
        m = evaluate(model, support, test, topology, metric).metrics
        rows.append({"condition": condition_name(cell), **m, "n_test": len(test)})
    return rows


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})
