"""Dual-encoder scorer: a query tower (trigram + word embedding bags merged
by attention fusion) against an embedding-bag category tower, scored by
cosine similarity over every taxonomy node.

Parameters are stored float32 (the checkpoint block format) while all
forward math runs in float64.  Category text is the normalized full path
text of a node ("home//furniture//sofa"), so queries that share words with
any ancestor segment get signal at every level.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .taxonomy import Taxonomy, render_path
from .textfeat import FeatureConfig, normalize, trigram_features, word_features

CHECKPOINT_MAGIC = b"HIERCAT1"

RAW_COSINE = "raw-cosine"
NORMALIZED = "normalized"


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint bytes."""


@dataclass
class ScoreMap:
    """One scalar per taxonomy node, in the taxonomy's depth-major order.

    ``phase`` is ``"raw-cosine"`` straight out of the scorer and
    ``"normalized"`` after hierarchical inference (per-level softmax).
    """

    node_ids: np.ndarray
    values: np.ndarray
    phase: str

    def as_dict(self) -> dict[int, float]:
        return {int(n): float(v) for n, v in zip(self.node_ids, self.values)}

    @classmethod
    def from_dict(cls, taxonomy: Taxonomy, scores: dict[int, float], phase: str = RAW_COSINE) -> "ScoreMap":
        missing = [nid for nid in taxonomy.node_order.tolist() if nid not in scores]
        if missing:
            raise KeyError(f"score map is missing entries for nodes {missing[:5]}")
        values = np.asarray([scores[nid] for nid in taxonomy.node_order.tolist()], dtype=np.float64)
        return cls(taxonomy.node_order, values, phase)


@dataclass
class QueryTower:
    """Query-side parameters only; what a serving bundle actually deploys."""

    dim: int
    feature_config: FeatureConfig
    query_trigram: np.ndarray
    query_word: np.ndarray
    attn_vector: np.ndarray


@dataclass
class DualEncoderModel:
    """All learnable parameters plus the config needed to reproduce them."""

    dim: int
    feature_config: FeatureConfig
    logit_scale: float
    seed: int
    taxonomy_fingerprint: str
    query_trigram: np.ndarray  # (trigram_buckets, dim) float32
    query_word: np.ndarray     # (word_buckets, dim) float32
    attn_vector: np.ndarray    # (dim,) float32
    category: np.ndarray       # (trigram_buckets, dim) float32

    def query_tower(self) -> QueryTower:
        return QueryTower(
            dim=self.dim,
            feature_config=self.feature_config,
            query_trigram=self.query_trigram,
            query_word=self.query_word,
            attn_vector=self.attn_vector,
        )

    def parameter_blocks(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("query_trigram", self.query_trigram),
            ("query_word", self.query_word),
            ("attn_vector", self.attn_vector),
            ("category", self.category),
        ]


@dataclass
class CategoryEmbeddingTable:
    """Precomputed unit-norm category vectors, one row per taxonomy node."""

    node_ids: np.ndarray   # taxonomy depth-major order
    matrix: np.ndarray     # (n_nodes, dim) float64
    model_version: str
    taxonomy_fingerprint: str


def init_model(
    taxonomy: Taxonomy,
    feature_config: FeatureConfig | None = None,
    dim: int = 128,
    seed: int = 0,
    logit_scale: float = 16.0,
) -> DualEncoderModel:
    """Fresh model with uniform(-1/sqrt(dim), 1/sqrt(dim)) parameters."""
    config = feature_config or FeatureConfig()
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)

    def table(rows: int) -> np.ndarray:
        return rng.uniform(-bound, bound, size=(rows, dim)).astype(np.float32)

    query_trigram = table(config.trigram_buckets)
    query_word = table(config.word_buckets)
    attn_vector = rng.uniform(-bound, bound, size=dim).astype(np.float32)
    category = table(config.trigram_buckets)
    return DualEncoderModel(
        dim=dim,
        feature_config=config,
        logit_scale=float(logit_scale),
        seed=seed,
        taxonomy_fingerprint=taxonomy.fingerprint,
        query_trigram=query_trigram,
        query_word=query_word,
        attn_vector=attn_vector,
        category=category,
    )


def pool_rows(table: np.ndarray, ids: list[int]) -> np.ndarray:
    """Mean of the given rows in float64; zero vector for an empty bag."""
    if not ids:
        return np.zeros(table.shape[1], dtype=np.float64)
    return table[np.asarray(ids, dtype=np.int64)].astype(np.float64).mean(axis=0)


def attention_weights(attn_vector: np.ndarray, channels: list[np.ndarray]) -> np.ndarray:
    """Softmax over per-channel scores ``attn . channel``; sums to one."""
    scores = np.asarray([float(np.dot(attn_vector, c)) for c in channels])
    scores = scores - scores.max()
    exp = np.exp(scores)
    return exp / exp.sum()


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    """Unit vector, except the zero vector which stays zero (degenerate)."""
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec
    return vec / norm


def is_degenerate(vec: np.ndarray) -> bool:
    return not vec.any()


def encode_query(tower: QueryTower | DualEncoderModel, query_text: str) -> np.ndarray:
    """Fused, L2-normalized query embedding.

    An empty (or whitespace-only) query encodes to the all-zero vector,
    the degenerate marker checked by :func:`is_degenerate`.
    """
    text = normalize(query_text)
    config = tower.feature_config
    u_tri = pool_rows(tower.query_trigram, trigram_features(text, config).ids)
    u_word = pool_rows(tower.query_word, word_features(text, config).ids)
    weights = attention_weights(tower.attn_vector.astype(np.float64), [u_tri, u_word])
    fused = weights[0] * u_tri + weights[1] * u_word
    return l2_normalize(fused)


def category_text(taxonomy: Taxonomy, node_id: int) -> str:
    """Normalized full path text of a node, e.g. ``home//furniture//sofa``."""
    return normalize(render_path(taxonomy, taxonomy.path_to(node_id)))


def encode_category(model: DualEncoderModel, taxonomy: Taxonomy, node_id: int) -> np.ndarray:
    """Unit-norm category embedding from the trigram-only category tower."""
    text = category_text(taxonomy, node_id)
    bag = trigram_features(text, model.feature_config)
    return l2_normalize(pool_rows(model.category, bag.ids))


def model_fingerprint(model: DualEncoderModel) -> str:
    """Content hash of the checkpoint bytes; used as the model version tag."""
    sink = io.BytesIO()
    save_checkpoint(model, sink)
    return hashlib.sha256(sink.getvalue()).hexdigest()[:16]


def build_category_table(
    model: DualEncoderModel, taxonomy: Taxonomy, model_version: str | None = None
) -> CategoryEmbeddingTable:
    """Encode every taxonomy node once into a dense lookup table."""
    matrix = np.stack(
        [encode_category(model, taxonomy, int(nid)) for nid in taxonomy.node_order]
    )
    return CategoryEmbeddingTable(
        node_ids=taxonomy.node_order,
        matrix=matrix,
        model_version=model_version or model_fingerprint(model),
        taxonomy_fingerprint=taxonomy.fingerprint,
    )


def score_with_table(table: CategoryEmbeddingTable, query_vec: np.ndarray) -> ScoreMap:
    """Cosine of a unit query vector against every cached category vector."""
    return ScoreMap(table.node_ids, table.matrix @ query_vec, RAW_COSINE)


def score_all(model: DualEncoderModel, taxonomy: Taxonomy, query_text: str) -> ScoreMap:
    """Raw cosine score for every node; the serving path computes the exact
    same values from its precomputed table."""
    table = build_category_table(model, taxonomy, model_version="")
    return score_with_table(table, encode_query(model, query_text))


# --- checkpoint io ---------------------------------------------------------

def _header_dict(model: DualEncoderModel) -> dict:
    return {
        "dim": model.dim,
        "trigram_buckets": model.feature_config.trigram_buckets,
        "word_buckets": model.feature_config.word_buckets,
        "hash_seed": model.feature_config.hash_seed,
        "boundary_markers": model.feature_config.boundary_markers,
        "seed": model.seed,
        "logit_scale": model.logit_scale,
        "taxonomy_fingerprint": model.taxonomy_fingerprint,
        "blocks": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in model.parameter_blocks()
        ],
    }


def save_checkpoint(model: DualEncoderModel, sink: str | Path | BinaryIO) -> None:
    """Write magic, one JSON header line, then float32 LE parameter blocks."""
    own = isinstance(sink, (str, Path))
    fh: BinaryIO = open(sink, "wb") if own else sink  # type: ignore[arg-type]
    try:
        fh.write(CHECKPOINT_MAGIC)
        header = json.dumps(_header_dict(model), sort_keys=True, separators=(",", ":"))
        fh.write(header.encode("utf-8") + b"\n")
        for _, arr in model.parameter_blocks():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    finally:
        if own:
            fh.close()


_BLOCK_NAMES = ("query_trigram", "query_word", "attn_vector", "category")


def load_checkpoint(source: str | Path | BinaryIO) -> DualEncoderModel:
    """Read a checkpoint back; the round trip is byte-exact.

    Raises :class:`CheckpointError` on a bad magic, a truncated file, or
    block shapes inconsistent with the header dims.
    """
    own = isinstance(source, (str, Path))
    fh: BinaryIO = open(source, "rb") if own else source  # type: ignore[arg-type]
    try:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad magic {magic!r}: not a {CHECKPOINT_MAGIC.decode()} checkpoint"
            )
        header_line = bytearray()
        while True:
            byte = fh.read(1)
            if not byte:
                raise CheckpointError("truncated checkpoint: unterminated header")
            if byte == b"\n":
                break
            header_line.extend(byte)
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

        try:
            dim = int(header["dim"])
            config = FeatureConfig(
                trigram_buckets=int(header["trigram_buckets"]),
                word_buckets=int(header["word_buckets"]),
                hash_seed=int(header["hash_seed"]),
                boundary_markers=bool(header["boundary_markers"]),
            )
            blocks = header["blocks"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"incomplete checkpoint header: {exc}") from None

        if tuple(b["name"] for b in blocks) != _BLOCK_NAMES:
            raise CheckpointError(f"unexpected parameter blocks: {blocks!r}")
        expected_shapes = {
            "query_trigram": (config.trigram_buckets, dim),
            "query_word": (config.word_buckets, dim),
            "attn_vector": (dim,),
            "category": (config.trigram_buckets, dim),
        }
        arrays: dict[str, np.ndarray] = {}
        for block in blocks:
            shape = tuple(int(s) for s in block["shape"])
            if shape != expected_shapes[block["name"]]:
                raise CheckpointError(
                    f"dimension mismatch for block {block['name']}: header declares "
                    f"{shape}, config implies {expected_shapes[block['name']]}"
                )
            count = int(np.prod(shape))
            data = fh.read(count * 4)
            if len(data) != count * 4:
                raise CheckpointError(f"truncated checkpoint in block {block['name']}")
            arrays[block["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after final parameter block")
    finally:
        if own:
            fh.close()

    return DualEncoderModel(
        dim=dim,
        feature_config=config,
        logit_scale=float(header["logit_scale"]),
        seed=int(header["seed"]),
        taxonomy_fingerprint=str(header["taxonomy_fingerprint"]),
        query_trigram=arrays["query_trigram"],
        query_word=arrays["query_word"],
        attn_vector=arrays["attn_vector"],
        category=arrays["category"],
    )
