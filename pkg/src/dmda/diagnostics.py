"""Analysis instruments: domain-discrepancy proxy, linear probes,
activation-frequency comparison, and embedding export.

Probes are single dense layers trained from zero init with 200
full-batch gradient steps at rate 0.1 -- a fixed recipe so numbers are
comparable across runs. The train/held-out split strides the data
(every 5th sample held out), which keeps diagnostics fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROBE_STEPS = 200
PROBE_LR = 0.1
HOLDOUT_STRIDE = 5  # every 5th sample held out -> 80/20 split


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _train_probe(x, y, n_classes, steps=PROBE_STEPS, lr=PROBE_LR):
    """Full-batch gradient descent on a zero-initialized softmax layer."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(steps):
        p = _softmax(x @ w + b)
        delta = (p - onehot) / n
        w -= lr * (x.T @ delta)
        b -= lr * delta.sum(axis=0)
    return w, b


def _error_rate(w, b, x, y):
    pred = np.argmax(x @ w + b, axis=1)
    return float((pred != y).mean())


def _stride_split(n):
    idx = np.arange(n)
    test = idx[HOLDOUT_STRIDE - 1::HOLDOUT_STRIDE]
    train = np.setdiff1d(idx, test)
    return train, test


def _probe_errors(features, labels, n_classes):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train, test = _stride_split(len(labels))
    w, b = _train_probe(features[train], labels[train], n_classes)
    return (_error_rate(w, b, features[train], labels[train]),
            _error_rate(w, b, features[test], labels[test]))


def linear_probe_error(features, labels) -> float:
    """Held-out error of a single dense layer fit to (feature, label) pairs."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError(f"linear_probe_error: need >= 2 classes, got {classes.size}")
    n_classes = int(labels.max()) + 1
    _, test_err = _probe_errors(features, labels, n_classes)
    return test_err


def a_distance_from_error(sigma: float) -> float:
    """2*(1 - 2*sigma), clipped to [0, 2]."""
    return float(np.clip(2.0 * (1.0 - 2.0 * sigma), 0.0, 2.0))


def proxy_a_distance_report(features_source, features_target, seed: int = 0):
    """Train a one-layer source-vs-target discriminator; report (d_A, sigma).

    Both sets are subsampled to the same size (label balance), pooled,
    and split 80/20 by striding.
    """
    fs = np.asarray(features_source, dtype=np.float64)
    ft = np.asarray(features_target, dtype=np.float64)
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[1] != ft.shape[1]:
        raise ValueError(
            f"proxy_a_distance: feature dims differ: {fs.shape} vs {ft.shape}")
    if len(fs) == 0 or len(ft) == 0:
        raise ValueError("proxy_a_distance: empty feature set")
    rng = np.random.default_rng(seed)
    n = min(len(fs), len(ft))
    fs = fs[rng.choice(len(fs), size=n, replace=False)]
    ft = ft[rng.choice(len(ft), size=n, replace=False)]
    pooled = np.concatenate([fs, ft])
    domain = np.concatenate([np.zeros(n, dtype=np.int64),
                             np.ones(n, dtype=np.int64)])
    # Interleave so the strided holdout sees both domains evenly.
    order = np.arange(2 * n).reshape(2, n).T.ravel()
    pooled, domain = pooled[order], domain[order]
    _, sigma = _probe_errors(pooled, domain, 2)
    return a_distance_from_error(sigma), sigma


def proxy_a_distance(features_source, features_target, seed: int = 0) -> float:
    d_a, _ = proxy_a_distance_report(features_source, features_target, seed)
    return d_a


@dataclass
class FrequencyDivergence:
    """Per-channel target-minus-source activation-frequency gaps."""

    gaps: np.ndarray           # original channel order
    source_order: np.ndarray   # channels sorted by descending source frequency
    max_gap: float
    max_gap_channel: int


def frequency_divergence(stats_source, stats_target) -> FrequencyDivergence:
    fs = np.asarray(stats_source.frequencies, dtype=np.float64)
    ft = np.asarray(stats_target.frequencies, dtype=np.float64)
    if fs.shape != ft.shape:
        raise ValueError(
            f"frequency_divergence: channel counts differ: {fs.shape} vs {ft.shape}")
    gaps = ft - fs
    order = np.argsort(-fs, kind="stable")
    idx = int(np.argmax(gaps))
    return FrequencyDivergence(gaps=gaps, source_order=order,
                               max_gap=float(gaps[idx]), max_gap_channel=idx)


def subsample_rows(arr, n: int, seed: int = 0) -> np.ndarray:
    """Seeded uniform subsample without replacement along the first axis."""
    arr = np.asarray(arr)
    if n > len(arr):
        raise ValueError(f"subsample_rows: asked for {n} of {len(arr)} rows")
    rng = np.random.default_rng(seed)
    return arr[rng.choice(len(arr), size=n, replace=False)]


def export_embeddings(features, labels, domains, path):
    """TSV rows domain_id, label, f_0..f_{K-1}; values round-trip exactly."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if not (len(features) == len(labels) == len(domains)):
        raise ValueError("export_embeddings: inconsistent lengths")
    k = features.shape[1] if features.ndim == 2 else 0
    header = ["domain_id", "label"] + [f"f_{i}" for i in range(k)]
    lines = ["\t".join(header)]
    for dom, lab, row in zip(domains, labels, features):
        lines.append("\t".join([str(int(dom)), str(int(lab))]
                               + [repr(v) for v in row]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
