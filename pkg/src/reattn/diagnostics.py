"""Attention-collapse measurement.

Everything here is a pure function of detached forward traces: cross-layer
column cosines, thresholded similarity ratios, similar-block counting, the
last-unique-block rule that anchors attention reuse, cross-head similarity,
and feature-similarity curves. Batch aggregation is always per-sample
metrics averaged afterwards.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from reattn.attention import AttentionMap
from reattn.errors import DimensionError, ParameterError

DEFAULT_VECTOR_THRESHOLD = 0.5
DEFAULT_BLOCK_THRESHOLD = 0.8
DEFAULT_UNIQUE_THRESHOLD = 0.9


class DegenerateSimilarityWarning(UserWarning):
    """A zero-norm column or an all-similar stack was flagged, not failed."""


def _map_values(m) -> np.ndarray:
    v = m.values if isinstance(m, AttentionMap) else np.asarray(m)
    if v.ndim != 3 or v.shape[-1] != v.shape[-2]:
        raise DimensionError(f"attention map must be [H, T, T], got {v.shape}")
    return v


@dataclass
class SimilarityMatrix:
    """Per-head, per-token cosine between two layers' contribution columns."""

    values: np.ndarray  # [H, T]
    layer_pair: tuple[int, int] = (0, 0)


def cross_layer_similarity(map_p, map_q, layer_pair: tuple[int, int] = (0, 0)
                           ) -> SimilarityMatrix:
    """Entry (h, t): cosine of column vectors A_p[h, :, t] and A_q[h, :, t].

    The column for token t says how much t contributes to every output
    token, so the entry measures whether t plays the same role in both
    layers. Zero-norm columns get a flagged 0.
    """
    p, q = _map_values(map_p), _map_values(map_q)
    if p.shape != q.shape:
        raise DimensionError(f"map shapes disagree: {p.shape} vs {q.shape}")
    dots = np.einsum("hit,hit->ht", p, q)
    norm_p = np.linalg.norm(p, axis=1)
    norm_q = np.linalg.norm(q, axis=1)
    denom = norm_p * norm_q
    zero = denom == 0
    if zero.any():
        warnings.warn("zero-norm attention column; cosine set to 0",
                      DegenerateSimilarityWarning, stacklevel=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(zero, 0.0, dots / np.where(zero, 1.0, denom))
    return SimilarityMatrix(values, layer_pair)


def similarity_ratio(matrix: SimilarityMatrix | np.ndarray,
                     vector_threshold: float = DEFAULT_VECTOR_THRESHOLD) -> float:
    """Fraction of (head, token) pairs whose cosine exceeds the threshold."""
    if not 0.0 < vector_threshold < 1.0:
        raise ParameterError(f"vector threshold must be in (0, 1), got {vector_threshold}")
    values = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix)
    return float((values > vector_threshold).mean())


def adjacent_pair_ratios(block_maps: Sequence, vector_threshold: float
                         = DEFAULT_VECTOR_THRESHOLD) -> list[float]:
    maps = [_map_values(m) for m in block_maps]
    return [
        similarity_ratio(cross_layer_similarity(maps[b - 1], maps[b], (b - 1, b)),
                         vector_threshold)
        for b in range(1, len(maps))
    ]


def count_similar_blocks(block_maps: Sequence,
                         vector_threshold: float = DEFAULT_VECTOR_THRESHOLD,
                         block_threshold: float = DEFAULT_BLOCK_THRESHOLD,
                         ) -> tuple[int, list[float]]:
    """Blocks whose map repeats the previous block's above the threshold.

    Returns the count and the underlying adjacent-pair ratios.
    """
    if len(block_maps) < 2:
        raise ParameterError("similar-block counting needs at least 2 maps")
    ratios = adjacent_pair_ratios(block_maps, vector_threshold)
    return sum(r > block_threshold for r in ratios), ratios


class UniqueBlockResult(NamedTuple):
    index: int
    degenerate: bool


def find_last_unique_block(block_maps: Sequence,
                           vector_threshold: float = DEFAULT_VECTOR_THRESHOLD,
                           unique_threshold: float = DEFAULT_UNIQUE_THRESHOLD,
                           ) -> UniqueBlockResult:
    """Largest block whose adjacent-pair ratios (both existing neighbors,
    strict <) stay under the threshold; the anchor for attention reuse.

    An all-similar stack has no unique block: the last index is returned
    with the degenerate flag so reuse experiments still have an anchor.
    """
    if len(block_maps) < 2:
        raise ParameterError("unique-block search needs at least 2 maps")
    ratios = adjacent_pair_ratios(block_maps, vector_threshold)
    return last_unique_from_ratios(ratios, unique_threshold)


def last_unique_from_ratios(ratios: Sequence[float],
                            unique_threshold: float = DEFAULT_UNIQUE_THRESHOLD,
                            ) -> UniqueBlockResult:
    num_blocks = len(ratios) + 1
    for b in range(num_blocks - 1, -1, -1):
        prev_ok = b == 0 or ratios[b - 1] < unique_threshold
        next_ok = b == num_blocks - 1 or ratios[b] < unique_threshold
        if prev_ok and next_ok:
            return UniqueBlockResult(b, False)
    warnings.warn("every block is similar to its neighbors; returning the last",
                  DegenerateSimilarityWarning, stacklevel=2)
    return UniqueBlockResult(num_blocks - 1, True)


def cross_head_similarity(block_map,
                          vector_threshold: float = DEFAULT_VECTOR_THRESHOLD,
                          ) -> tuple[float, np.ndarray]:
    """Head-pair similarity inside one block.

    Pair (h, h') scores the fraction of tokens whose contribution columns
    in the two heads are cosine-similar above the threshold. Returns the
    off-diagonal mean and the full HxH matrix.
    """
    values = _map_values(block_map)
    heads = values.shape[0]
    if heads < 2:
        raise ParameterError("cross-head similarity needs at least 2 heads")
    norms = np.linalg.norm(values, axis=1)  # [H, T]
    matrix = np.ones((heads, heads))
    for a in range(heads):
        for b in range(a + 1, heads):
            dots = np.einsum("it,it->t", values[a], values[b])
            denom = norms[a] * norms[b]
            zero = denom == 0
            with np.errstate(invalid="ignore", divide="ignore"):
                cos = np.where(zero, 0.0, dots / np.where(zero, 1.0, denom))
            matrix[a, b] = matrix[b, a] = float((cos > vector_threshold).mean())
    off = matrix[~np.eye(heads, dtype=bool)]
    return float(off.mean()), matrix


def feature_similarity(block_features: Sequence[np.ndarray]) -> list[float]:
    """Cosine of each block's flattened features against the last block's."""
    if not block_features:
        raise ParameterError("feature similarity needs at least 1 block")
    last = np.asarray(block_features[-1]).reshape(-1)
    last_norm = np.linalg.norm(last)
    out = []
    for feat in block_features:
        flat = np.asarray(feat).reshape(-1)
        denom = np.linalg.norm(flat) * last_norm
        if denom == 0:
            warnings.warn("zero-norm feature tensor; cosine set to 0",
                          DegenerateSimilarityWarning, stacklevel=2)
            out.append(0.0)
        else:
            out.append(float(flat @ last / denom))
    return out


# -- batch-level report ----------------------------------------------------------


@dataclass
class SimilarityReport:
    """Every collapse diagnostic for one probe set, sample-averaged."""

    adjacent_ratios: list[float]
    similar_block_count: int
    last_unique_block: int
    last_unique_degenerate: bool
    cross_head_ratios: list[float] | None
    feature_similarities: list[float]
    vector_threshold: float
    block_threshold: float
    unique_threshold: float
    moving_average_window: int | None = None
    adjacent_ratios_moving_avg: list[float] | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return len(self.feature_similarities)

    def to_dict(self) -> dict:
        return {
            "adjacent_ratios": self.adjacent_ratios,
            "similar_block_count": self.similar_block_count,
            "last_unique_block": self.last_unique_block,
            "last_unique_degenerate": self.last_unique_degenerate,
            "cross_head_ratios": self.cross_head_ratios,
            "feature_similarities": self.feature_similarities,
            "thresholds": {
                "vector": self.vector_threshold,
                "block": self.block_threshold,
                "unique": self.unique_threshold,
            },
            "moving_average_window": self.moving_average_window,
            "adjacent_ratios_moving_avg": self.adjacent_ratios_moving_avg,
            "metadata": self.metadata,
        }

    def write_json(self, path):
        with open(Path(path), "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path):
        """One row per block for plotting; pair ratios sit on their later block."""
        with open(Path(path), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["block", "adj_ratio", "feature_sim", "cross_head_mean"])
            for b in range(self.num_blocks):
                writer.writerow([
                    b,
                    "" if b == 0 else f"{self.adjacent_ratios[b - 1]:.6f}",
                    f"{self.feature_similarities[b]:.6f}",
                    "" if self.cross_head_ratios is None
                    else f"{self.cross_head_ratios[b]:.6f}",
                ])


def _moving_average(values: list[float], window: int) -> list[float]:
    if window < 1:
        raise ParameterError(f"moving-average window must be >= 1, got {window}")
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo:i + 1])))
    return out


def similarity_report(traces,
                      vector_threshold: float = DEFAULT_VECTOR_THRESHOLD,
                      block_threshold: float = DEFAULT_BLOCK_THRESHOLD,
                      unique_threshold: float = DEFAULT_UNIQUE_THRESHOLD,
                      moving_average_window: int | None = None,
                      metadata: dict | None = None) -> SimilarityReport:
    """Full report over per-sample forward traces (see `forward_traces`).

    Ratios and cosines are computed per sample, then averaged; the block
    count and unique-block rule run on the averaged adjacent ratios.
    """
    traces = list(traces)
    if not traces:
        raise ParameterError("similarity report needs at least one trace")
    num_blocks = len(traces[0].block_maps)
    heads = traces[0].block_maps[0].heads if num_blocks else 0

    per_sample_ratios = np.array([
        adjacent_pair_ratios(tr.block_maps, vector_threshold) for tr in traces
    ])  # [N, B-1]
    adjacent = [float(x) for x in per_sample_ratios.mean(axis=0)] if num_blocks > 1 else []

    similar_count = sum(r > block_threshold for r in adjacent)
    if adjacent:
        unique = last_unique_from_ratios(adjacent, unique_threshold)
    else:
        unique = UniqueBlockResult(0, False)

    cross_head: list[float] | None
    if heads >= 2:
        per_sample_heads = np.array([
            [cross_head_similarity(m, vector_threshold)[0] for m in tr.block_maps]
            for tr in traces
        ])
        cross_head = [float(x) for x in per_sample_heads.mean(axis=0)]
    else:
        cross_head = None

    per_sample_feats = np.array([feature_similarity(tr.block_features) for tr in traces])
    feats = [float(x) for x in per_sample_feats.mean(axis=0)]

    return SimilarityReport(
        adjacent_ratios=adjacent,
        similar_block_count=similar_count,
        last_unique_block=unique.index,
        last_unique_degenerate=unique.degenerate,
        cross_head_ratios=cross_head,
        feature_similarities=feats,
        vector_threshold=vector_threshold,
        block_threshold=block_threshold,
        unique_threshold=unique_threshold,
        moving_average_window=moving_average_window,
        adjacent_ratios_moving_avg=(
            _moving_average(adjacent, moving_average_window)
            if moving_average_window else None
        ),
        metadata=metadata or {},
    )
