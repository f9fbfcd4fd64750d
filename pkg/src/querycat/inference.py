"""Hierarchical inference over the taxonomy tree and beam search over the
resulting per-level distributions.

Raw cosine scores are consolidated bottom-up: walking levels from the
deepest to the root, each node's logit is ``alpha * scale * cosine`` plus
the already-normalized probability mass of its children, then a softmax is
taken across the whole level.  Beam search then descends root-ward picking
the best children, stopping early when the next step's probability falls
under a per-depth threshold tuned by the percentile method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import NORMALIZED, RAW_COSINE, DualEncoderModel, ScoreMap, build_category_table, encode_query, is_degenerate, score_with_table
from .taxonomy import CategoryPath, Taxonomy


@dataclass
class BeamConfig:
    """Beam width, per-depth early-stop thresholds, and the alpha knob that
    trades the node's own cosine against its children's consolidated mass."""

    width: int = 1
    thresholds: Mapping[int, float] = field(default_factory=dict)
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")

    def threshold(self, depth: int) -> float:
        return self.thresholds.get(depth, float("-inf"))


@dataclass
class Prediction:
    """A ranked category path with its per-depth probabilities."""

    path: CategoryPath
    per_level_probs: tuple[float, ...]
    path_score: float


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def hier_infer(
    taxonomy: Taxonomy,
    raw: ScoreMap,
    alpha: float = 1.0,
    logit_scale: float = 1.0,
) -> ScoreMap:
    """Turn raw cosines into per-level probability distributions.

    Levels are processed deepest-first.  At each level the logit of node
    ``n`` is ``alpha * logit_scale * raw[n] + sum(p[children(n)])`` and the
    softmax runs across all nodes of that level, so each level's
    probabilities sum to one.  With ``alpha=1, logit_scale=1`` this is the
    plain up-propagation algorithm; ``alpha=0`` keeps only child mass.
    """
    if raw.phase != RAW_COSINE:
        raise ValueError(f"hier_infer expects a raw-cosine map, got phase {raw.phase!r}")
    if len(raw.values) != len(taxonomy) or not np.array_equal(raw.node_ids, taxonomy.node_order):
        raise KeyError("score map does not cover this taxonomy's nodes")

    values = np.asarray(raw.values, dtype=np.float64)
    out = np.empty_like(values)
    child_mass = np.zeros_like(values)
    coeff = alpha * logit_scale
    for depth in range(taxonomy.max_depth, 0, -1):
        sl = taxonomy.level_slices[depth]
        probs = _softmax(coeff * values[sl] + child_mass[sl])
        out[sl] = probs
        if depth > 1:
            # parents sit at the previous depth; accumulate in node-id order
            np.add.at(child_mass, taxonomy.parent_position[sl], probs)
    return ScoreMap(taxonomy.node_order, out, NORMALIZED)


@dataclass
class _Partial:
    node_ids: tuple[int, ...]
    probs: tuple[float, ...]
    score: float


def beam_search(taxonomy: Taxonomy, normalized: ScoreMap, config: BeamConfig) -> list[Prediction]:
    """Descend the tree keeping the ``width`` best partial paths.

    A partial path extends through children whose probability clears the
    threshold for their depth; when none do (or the node is a leaf) the
    path is finalized.  Ties rank by ascending node id.  Returns at most
    ``width`` finalized paths ordered by descending path score.
    """
    if normalized.phase != NORMALIZED:
        raise ValueError(f"beam_search expects a normalized map, got phase {normalized.phase!r}")
    prob = {int(n): float(v) for n, v in zip(normalized.node_ids, normalized.values)}

    roots = sorted(taxonomy.roots, key=lambda nid: (-prob[nid], nid))
    beam = [
        _Partial((nid,), (prob[nid],), prob[nid])
        for nid in roots[: config.width]
    ]
    finalized: list[_Partial] = []
    while beam:
        candidates: list[_Partial] = []
        for partial in beam:
            depth = len(partial.node_ids)
            children = taxonomy.children[partial.node_ids[-1]]
            cutoff = config.threshold(depth + 1)
            allowed = [c for c in children if prob[c] >= cutoff]
            if not allowed:
                finalized.append(partial)
                continue
            for child in allowed:
                candidates.append(
                    _Partial(
                        partial.node_ids + (child,),
                        partial.probs + (prob[child],),
                        partial.score * prob[child],
                    )
                )
        candidates.sort(key=lambda p: (-p.score, p.node_ids))
        beam = candidates[: config.width]

    finalized.sort(key=lambda p: (-p.score, p.node_ids))
    return [
        Prediction(CategoryPath(p.node_ids), p.probs, p.score)
        for p in finalized[: config.width]
    ]


def exhaustive_paths(taxonomy: Taxonomy, normalized: ScoreMap) -> list[Prediction]:
    """Every root-to-leaf path ranked like the beam would; the brute-force
    reference the beam must reproduce at full width with no thresholds."""
    prob = {int(n): float(v) for n, v in zip(normalized.node_ids, normalized.values)}
    results: list[_Partial] = []

    def walk(partial: _Partial) -> None:
        children = taxonomy.children[partial.node_ids[-1]]
        if not children:
            results.append(partial)
            return
        for child in children:
            walk(
                _Partial(
                    partial.node_ids + (child,),
                    partial.probs + (prob[child],),
                    partial.score * prob[child],
                )
            )

    for root in taxonomy.roots:
        walk(_Partial((root,), (prob[root],), prob[root]))
    results.sort(key=lambda p: (-p.score, p.node_ids))
    return [Prediction(CategoryPath(p.node_ids), p.probs, p.score) for p in results]


def thresholds_from_stats(
    stats: Mapping[int, Sequence[float]], percentile: float
) -> dict[int, float]:
    """Per-depth percentile (linear interpolation) of observed beam probs."""
    if not 0 <= percentile <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    return {
        depth: float(np.percentile(np.asarray(values, dtype=np.float64), percentile))
        for depth, values in stats.items()
        if len(values) > 0
    }


def calibrate_thresholds(
    taxonomy: Taxonomy,
    model: DualEncoderModel,
    calibration_queries: Sequence[str],
    percentile: float,
    alpha: float = 1.0,
    logit_scale: float | None = None,
) -> dict[int, float]:
    """Tune per-depth early-stop thresholds from a calibration query set.

    Each query is scored and descended with an unthresholded width-1 beam;
    the probability observed at the chosen node of each depth feeds that
    depth's distribution, and the threshold is its given percentile.
    """
    if not calibration_queries:
        raise ValueError("calibration set is empty")
    scale = model.logit_scale if logit_scale is None else logit_scale
    table = build_category_table(model, taxonomy, model_version="")
    stats: dict[int, list[float]] = {}
    for query in calibration_queries:
        qvec = encode_query(model, query)
        if is_degenerate(qvec):
            continue
        normalized = hier_infer(taxonomy, score_with_table(table, qvec), alpha=alpha, logit_scale=scale)
        top = beam_search(taxonomy, normalized, BeamConfig(width=1))
        if not top:
            continue
        for depth, p in enumerate(top[0].per_level_probs, start=1):
            stats.setdefault(depth, []).append(p)
    if not stats:
        raise ValueError("no usable calibration queries (all degenerate)")
    return thresholds_from_stats(stats, percentile)
