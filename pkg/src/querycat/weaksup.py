"""Weakly supervised training data: mining aggregated <query, category>
pairs out of engagement logs, and a seeded synthetic-log generator with
controllable "browsy" noise for desk-scale experiments.

Engagement logs are JSON lines with keys ``query``, ``product_id``,
``category_path``, ``label_source``, ``timestamp``.  Mined pairs persist
as TSV ``query<TAB>path_text<TAB>weight``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .taxonomy import CategoryPath, Taxonomy, TaxonomyError, parse_path, render_path, truncate_path
from .textfeat import normalize

LABEL_SOURCES = ("seller", "model", "both")


@dataclass
class EngagementRecord:
    """One logged <query, engaged product> event with its category label."""

    query: str
    product_id: str
    category_path: str
    label_source: str
    timestamp: int


@dataclass
class TrainingPair:
    """Aggregated weak label: normalized query, path, aggregation count."""

    query: str
    path: CategoryPath
    weight: int


@dataclass
class PretrainPair:
    """A <query, product title> pair for retrieval pre-training."""

    query: str
    product_text: str


@dataclass
class NoiseModel:
    """Label corruption knobs for the synthetic generator.

    ``p_browse`` is the chance an event's label drifts off the true intent
    path; the drift kind is drawn from ``browse_kind_weights``.  Separately,
    model-sourced labels lose 1-2 trailing levels with ``truncation_prob``
    (model labels are less precise at deeper levels).
    """

    p_browse: float = 0.3
    browse_kind_weights: dict[str, float] = field(
        default_factory=lambda: {"sibling": 0.4, "ancestor": 0.4, "uniform_random": 0.2}
    )
    truncation_prob: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_browse <= 1.0:
            raise ValueError(f"p_browse must be in [0, 1], got {self.p_browse}")
        if not 0.0 <= self.truncation_prob <= 1.0:
            raise ValueError(f"truncation_prob must be in [0, 1], got {self.truncation_prob}")
        unknown = set(self.browse_kind_weights) - {"sibling", "ancestor", "uniform_random"}
        if unknown:
            raise ValueError(f"unknown browse kinds: {sorted(unknown)}")
        total = sum(self.browse_kind_weights.values())
        if any(w < 0 for w in self.browse_kind_weights.values()) or abs(total - 1.0) > 1e-9:
            raise ValueError("browse_kind_weights must be nonnegative and sum to 1")


@dataclass
class MiningReport:
    """Counters from one mining run."""

    n_records: int = 0
    n_skipped: int = 0
    n_groups: int = 0
    n_filtered: int = 0


def mine_pairs(
    records: Iterable[EngagementRecord],
    taxonomy: Taxonomy,
    min_frequency: int = 2,
) -> tuple[list[TrainingPair], MiningReport]:
    """Group records by (normalized query, path), count, and filter.

    Groups seen fewer than ``min_frequency`` times are dropped.  Records
    whose path does not parse are skipped and counted in the report.
    Multiple surviving paths per query are kept.  Output order is by
    (query, path text), so the result is independent of input order.
    """
    if min_frequency < 1:
        raise ValueError(f"min_frequency must be >= 1, got {min_frequency}")
    report = MiningReport()
    counts: dict[tuple[str, tuple[int, ...]], int] = {}
    paths: dict[tuple[int, ...], CategoryPath] = {}
    for record in records:
        report.n_records += 1
        try:
            path = parse_path(taxonomy, record.category_path)
        except TaxonomyError:
            report.n_skipped += 1
            continue
        key = (normalize(record.query), path.node_ids)
        counts[key] = counts.get(key, 0) + 1
        paths[path.node_ids] = path
    report.n_groups = len(counts)
    pairs = [
        TrainingPair(query, paths[node_ids], weight)
        for (query, node_ids), weight in counts.items()
        if weight >= min_frequency
    ]
    report.n_filtered = report.n_groups - len(pairs)
    pairs.sort(key=lambda p: (p.query, render_path(taxonomy, p.path)))
    return pairs, report


# --- synthetic benchmark generator ----------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, n_syllables: int = 2) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(n_syllables)
    )


def synthetic_taxonomy(
    n_roots: int = 8,
    branching: tuple[int, ...] = (4, 3),
    seed: int = 0,
) -> Taxonomy:
    """Regular taxonomy with pseudo-word names, unique among siblings.

    ``branching[i]`` children hang under every node of depth ``i + 1``, so
    the tree reaches depth ``len(branching) + 1``.
    """
    rng = np.random.default_rng(seed)
    entries: list[tuple[int, int | None, str]] = []
    next_id = 1

    def fresh_names(count: int) -> list[str]:
        names: list[str] = []
        while len(names) < count:
            name = _pseudo_word(rng, n_syllables=int(rng.integers(2, 4)))
            if name not in names:
                names.append(name)
        return names

    frontier: list[int] = []
    for name in fresh_names(n_roots):
        entries.append((next_id, None, name))
        frontier.append(next_id)
        next_id += 1
    for width in branching:
        next_frontier: list[int] = []
        for parent in frontier:
            for name in fresh_names(width):
                entries.append((next_id, parent, name))
                next_frontier.append(next_id)
                next_id += 1
        frontier = next_frontier
    return Taxonomy(entries)


def _mid_depth_weights(max_depth: int) -> np.ndarray:
    weights = np.array(
        [1.0 + min(d - 1, max_depth - d) for d in range(1, max_depth + 1)], dtype=np.float64
    )
    return weights / weights.sum()


def _sample_intent(taxonomy: Taxonomy, rng: np.random.Generator) -> CategoryPath:
    weights = _mid_depth_weights(taxonomy.max_depth)
    depth = int(rng.choice(np.arange(1, taxonomy.max_depth + 1), p=weights))
    level = taxonomy.levels[depth]
    node = int(level[rng.integers(len(level))])
    return taxonomy.path_to(node)


def _query_text(
    taxonomy: Taxonomy, path: CategoryPath, rng: np.random.Generator
) -> str:
    tokens = normalize(taxonomy.nodes[path.terminal].name).split()
    if len(path) > 1 and rng.random() < 0.5:
        ancestor = path.node_ids[int(rng.integers(len(path) - 1))]
        tokens += normalize(taxonomy.nodes[ancestor].name).split()
    for _ in range(int(rng.integers(0, 3))):
        tokens.append(_pseudo_word(rng))
    perm = rng.permutation(len(tokens))
    return " ".join(tokens[i] for i in perm)


def _corrupt_path(
    taxonomy: Taxonomy, truth: CategoryPath, kind: str, rng: np.random.Generator
) -> CategoryPath:
    if kind == "sibling":
        terminal = truth.terminal
        parent = taxonomy.nodes[terminal].parent_id
        siblings = [
            s for s in (taxonomy.children[parent] if parent is not None else taxonomy.roots)
            if s != terminal
        ]
        if not siblings:
            return truth
        pick = int(siblings[rng.integers(len(siblings))])
        return CategoryPath(truth.node_ids[:-1] + (pick,))
    if kind == "ancestor":
        if len(truth) == 1:
            return truth  # already a root-level node
        keep = int(rng.integers(1, len(truth)))
        return CategoryPath(truth.node_ids[:keep])
    if kind == "uniform_random":
        node = int(taxonomy.node_order[rng.integers(len(taxonomy))])
        return taxonomy.path_to(node)
    raise ValueError(f"unknown browse kind {kind!r}")


def generate_synthetic_log(
    taxonomy: Taxonomy,
    n_queries: int = 5_000,
    events_per_query: int = 20,
    noise: NoiseModel | None = None,
    seed: int = 0,
) -> tuple[list[EngagementRecord], dict[str, CategoryPath]]:
    """Seeded engagement log with known ground-truth intents.

    Every synthetic query gets a true intent path biased toward mid
    depths; its text mixes the intent's node-name tokens with a few
    distractor tokens.  Each of its events logs the true path with
    probability ``1 - p_browse`` and a corrupted one otherwise; model-
    sourced labels additionally lose 1-2 levels with ``truncation_prob``.
    The same seed reproduces the stream byte for byte.
    """
    if len(taxonomy) == 0:
        raise ValueError("taxonomy is empty")
    noise = noise or NoiseModel()
    rng = np.random.default_rng(seed)
    kinds = sorted(noise.browse_kind_weights)
    kind_weights = np.array([noise.browse_kind_weights[k] for k in kinds], dtype=np.float64)
    if kind_weights.sum() > 0:
        kind_weights = kind_weights / kind_weights.sum()

    truth: dict[str, CategoryPath] = {}
    records: list[EngagementRecord] = []
    counter = 0
    base_ts = 1_700_000_000
    for _ in range(n_queries):
        intent = _sample_intent(taxonomy, rng)
        text = _query_text(taxonomy, intent, rng)
        while text in truth and truth[text].node_ids != intent.node_ids:
            text = f"{text} {_pseudo_word(rng)}"
        truth[text] = intent
        for _ in range(events_per_query):
            source = LABEL_SOURCES[
                int(rng.choice(3, p=np.array([0.25, 0.55, 0.20])))
            ]
            path = intent
            if rng.random() < noise.p_browse:
                kind = kinds[int(rng.choice(len(kinds), p=kind_weights))]
                path = _corrupt_path(taxonomy, path, kind, rng)
            if source == "model" and rng.random() < noise.truncation_prob:
                cut = int(rng.integers(1, 3))
                kept = truncate_path(path, max(1, len(path) - cut))
                path = kept if kept is not None else path
            records.append(
                EngagementRecord(
                    query=text,
                    product_id=f"p{counter:07d}",
                    category_path=render_path(taxonomy, path),
                    label_source=source,
                    timestamp=base_ts + counter,
                )
            )
            counter += 1
    return records, truth


def generate_pretrain_pairs(
    taxonomy: Taxonomy, n_pairs: int, seed: int = 0
) -> list[PretrainPair]:
    """Synthetic <query, product title> pairs over the same node vocabulary."""
    rng = np.random.default_rng(seed)
    pairs: list[PretrainPair] = []
    for _ in range(n_pairs):
        intent = _sample_intent(taxonomy, rng)
        query = _query_text(taxonomy, intent, rng)
        title_tokens = []
        for nid in intent.node_ids:
            title_tokens += normalize(taxonomy.nodes[nid].name).split()
        for _ in range(int(rng.integers(1, 4))):
            title_tokens.append(_pseudo_word(rng))
        perm = rng.permutation(len(title_tokens))
        pairs.append(PretrainPair(query, " ".join(title_tokens[i] for i in perm)))
    return pairs


# --- file formats -----------------------------------------------------------

def write_engagement_log(records: Iterable[EngagementRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "query": r.query,
                        "product_id": r.product_id,
                        "category_path": r.category_path,
                        "label_source": r.label_source,
                        "timestamp": r.timestamp,
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_engagement_log(path: str | Path) -> list[EngagementRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                EngagementRecord(
                    query=obj["query"],
                    product_id=obj["product_id"],
                    category_path=obj["category_path"],
                    label_source=obj["label_source"],
                    timestamp=int(obj["timestamp"]),
                )
            )
    return records


def write_pairs_tsv(pairs: Iterable[TrainingPair], taxonomy: Taxonomy, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.query}\t{render_path(taxonomy, p.path)}\t{p.weight}\n")


def read_pairs_tsv(path: str | Path, taxonomy: Taxonomy) -> list[TrainingPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 3 fields")
            query, path_text, weight = parts
            pairs.append(TrainingPair(query, parse_path(taxonomy, path_text), int(weight)))
    return pairs


def write_pretrain_tsv(pairs: Iterable[PretrainPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.query}\t{p.product_text}\n")


def read_pretrain_tsv(path: str | Path) -> list[PretrainPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 fields")
            pairs.append(PretrainPair(parts[0], parts[1]))
    return pairs
