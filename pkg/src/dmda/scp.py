"""Selective channel pruning and the channel-dropout baseline.

Channel importance comes from the auxiliary classifier's weight matrix:
for each class, channels whose weight sits at or below the q-th
percentile of that class's weight vector are zeroed. Masks are plain
arrays, so no gradient ever flows through their construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, mean_spatial, scale_channels, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class ChannelMask:
    """Per-class binary channel masks, shape (C, K)."""

    masks: np.ndarray
    source_quantile: float

    def rows_for(self, labels) -> np.ndarray:
        """Select one mask row per label, giving a (B, K) constant."""
        return self.masks[np.asarray(labels, dtype=np.int64)]


@dataclass
class ChannelStats:
    """Per-channel activation frequency over a sample set."""

    frequencies: np.ndarray
    threshold_ratio: float
    n_samples: int


def gap(feature_map: Tensor) -> Tensor:
    """Global average pooling: spatial mean per channel."""
    return mean_spatial(feature_map)


def aux_loss(g_a, phi_hat: Tensor, labels) -> Tensor:
    """Mean cross-entropy of the auxiliary classifier on pooled activations."""
    return softmax_cross_entropy(g_a(phi_hat), labels)


def build_masks(weight: np.ndarray, q: float) -> ChannelMask:
    """Threshold each class's weight column at its q-th percentile.

    A channel survives only on strict inequality above the linearly
    interpolated percentile. A degenerate all-equal column would prune
    everything, so it falls back to keeping all channels.
    """
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2:
        raise ShapeError(f"build_masks: expected (K, C) weights, got {weight.shape}")
    if not 0 <= q < 100:
        raise ValueError(f"build_masks: quantile must be in [0, 100), got {q}")
    k, c = weight.shape
    masks = np.zeros((c, k))
    for cls in range(c):
        col = weight[:, cls]
        row = col > np.percentile(col, q)
        if not row.any():
            logger.warning("degenerate weight column for class %d: keeping all "
                           "%d channels", cls, k)
            row = np.ones(k, dtype=bool)
        masks[cls] = row
    return ChannelMask(masks=masks, source_quantile=float(q))


def apply_mask(feature_map: Tensor, mask_rows: np.ndarray) -> Tensor:
    """Zero pruned channels of an (H, W, K) map or (B, H, W, K) batch.

    `mask_rows` is a (K,) row or a per-sample (B, K) selection; it is a
    constant with respect to differentiation.
    """
    return scale_channels(feature_map, mask_rows)


def channel_dropout(feature_map: Tensor, rate: float, rng: np.random.Generator,
                    training: bool = True) -> Tensor:
    """Zero each channel independently with probability `rate`.

    Survivors are rescaled by 1/(1-rate) so the expectation matches the
    input. Identity when rate is 0 or at evaluation time.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"channel_dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return feature_map
    k = feature_map.shape[-1]
    if feature_map.data.ndim == 4:
        shape = (feature_map.shape[0], k)
    elif feature_map.data.ndim == 3:
        shape = (k,)
    else:
        raise ShapeError(
            f"channel_dropout: expected 3-D or 4-D map, got {feature_map.shape}")
    keep = rng.random(shape) >= rate
    factors = keep / (1.0 - rate)
    return scale_channels(feature_map, factors)


def activation_frequency(maps, threshold_ratio: float = 0.01) -> ChannelStats:
    """Fraction of samples activating each channel.

    A channel counts as activated when its pooled value strictly exceeds
    `threshold_ratio` times the sample's maximum pooled value.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 4 or maps.shape[0] == 0:
        raise ValueError(
            f"activation_frequency: need a nonempty (N, H, W, K) set, got {maps.shape}")
    pooled = maps.mean(axis=(1, 2))
    tau = threshold_ratio * pooled.max(axis=1, keepdims=True)
    freq = (pooled > tau).mean(axis=0)
    return ChannelStats(frequencies=freq, threshold_ratio=threshold_ratio,
                        n_samples=maps.shape[0])


def write_frequency_csv(path, stats_source: ChannelStats, stats_target: ChannelStats):
    if stats_source.frequencies.shape != stats_target.frequencies.shape:
        raise ShapeError("write_frequency_csv: channel counts differ")
    lines = ["channel_index,frequency_source,frequency_target"]
    for i, (fs, ft) in enumerate(zip(stats_source.frequencies,
                                     stats_target.frequencies)):
        lines.append(f"{i},{fs!r},{ft!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
