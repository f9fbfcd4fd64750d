"""Optimization of the dual encoder: full-softmax cross-entropy over all
taxonomy nodes, optional in-batch retrieval pre-training of the query
tower, and finite-difference gradient verification.

All gradient math runs in float64 against the float32 parameter tables;
SGD with momentum applies updates in float32.  Every loop is seeded and
single-threaded, so a fixed seed reproduces checkpoints byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import DualEncoderModel, category_text
from .taxonomy import Taxonomy
from .textfeat import FeatureConfig, normalize, trigram_features, word_features
from .weaksup import PretrainPair, TrainingPair


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    logit_scale: float | None = None  # None: use the model's
    negative_mode: str = "in-batch"

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs, batch_size, learning_rate must be nonnegative/positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.negative_mode != "in-batch":
            raise ValueError(f"unsupported negative mode {self.negative_mode!r}")


@dataclass
class LossGrads:
    """Sparse gradients: touched embedding rows only, dense fusion vector."""

    query_trigram: dict[int, np.ndarray]
    query_word: dict[int, np.ndarray]
    attn_vector: np.ndarray
    category: dict[int, np.ndarray]


def softmax_cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) of -log softmax(logits)[target]."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    exp = np.exp(z - m)
    total = exp.sum()
    loss = float(np.log(total) + m - z[target])
    dz = exp / total
    dz[target] -= 1.0
    return loss, dz


# --- cached feature extraction ----------------------------------------------

class _CategoryFeatures:
    """Per-node trigram ids of category path text, flattened for pooling."""

    def __init__(self, taxonomy: Taxonomy, config: FeatureConfig) -> None:
        ids_per_node = [
            np.asarray(
                trigram_features(category_text(taxonomy, int(nid)), config).ids,
                dtype=np.int64,
            )
            for nid in taxonomy.node_order
        ]
        self.ids_per_node = ids_per_node
        self.counts = np.asarray([len(ids) for ids in ids_per_node], dtype=np.int64)
        self.flat = (
            np.concatenate(ids_per_node)
            if any(len(i) for i in ids_per_node)
            else np.zeros(0, dtype=np.int64)
        )
        self.n_nodes = len(ids_per_node)


_category_features_cache: dict[tuple[str, FeatureConfig], _CategoryFeatures] = {}


def _category_features(taxonomy: Taxonomy, config: FeatureConfig) -> _CategoryFeatures:
    key = (taxonomy.fingerprint, config)
    if key not in _category_features_cache:
        _category_features_cache[key] = _CategoryFeatures(taxonomy, config)
    return _category_features_cache[key]


def _segment_means(table: np.ndarray, flat: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-segment mean of table rows; zero rows for empty segments."""
    n = len(counts)
    dim = table.shape[1]
    sums = np.zeros((n, dim), dtype=np.float64)
    if flat.size:
        rows = table[flat].astype(np.float64)
        if counts.min() > 0:
            offsets = np.zeros(n, dtype=np.int64)
            np.cumsum(counts[:-1], out=offsets[1:])
            sums = np.add.reduceat(rows, offsets, axis=0)
        else:
            np.add.at(sums, np.repeat(np.arange(n), counts), rows)
    inv = np.zeros(n, dtype=np.float64)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    return sums * inv[:, None]


def _scatter_segment_grads(
    out: np.ndarray, d_means: np.ndarray, flat: np.ndarray, counts: np.ndarray
) -> None:
    """Accumulate d(mean)/d(rows) back into a dense gradient buffer."""
    if not flat.size:
        return
    inv = np.zeros(len(counts), dtype=np.float64)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    np.add.at(out, flat, np.repeat(d_means * inv[:, None], counts, axis=0))


def _normalize_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    return mat / safe[:, None], norms


def _normalize_rows_backward(d_hat: np.ndarray, hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    inner = np.sum(hat * d_hat, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    out = (d_hat - hat * inner) / safe[:, None]
    out[norms == 0.0] = 0.0
    return out


# --- batched query tower ------------------------------------------------------

@dataclass
class _QueryBatch:
    tri_flat: np.ndarray
    tri_counts: np.ndarray
    word_flat: np.ndarray
    word_counts: np.ndarray
    u_tri: np.ndarray
    u_word: np.ndarray
    w_tri: np.ndarray
    w_word: np.ndarray
    fused: np.ndarray
    norms: np.ndarray
    q_hat: np.ndarray


def _featurize_queries(
    texts: Sequence[str], config: FeatureConfig, cache: dict[str, tuple[np.ndarray, np.ndarray]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    tri_lists, word_lists = [], []
    for text in texts:
        if text not in cache:
            cache[text] = (
                np.asarray(trigram_features(text, config).ids, dtype=np.int64),
                np.asarray(word_features(text, config).ids, dtype=np.int64),
            )
        tri, word = cache[text]
        tri_lists.append(tri)
        word_lists.append(word)
    tri_counts = np.asarray([len(x) for x in tri_lists], dtype=np.int64)
    word_counts = np.asarray([len(x) for x in word_lists], dtype=np.int64)
    tri_flat = np.concatenate(tri_lists) if tri_counts.sum() else np.zeros(0, dtype=np.int64)
    word_flat = np.concatenate(word_lists) if word_counts.sum() else np.zeros(0, dtype=np.int64)
    return tri_flat, tri_counts, word_flat, word_counts


def _query_forward(model: DualEncoderModel, texts: Sequence[str], cache: dict) -> _QueryBatch:
    tri_flat, tri_counts, word_flat, word_counts = _featurize_queries(
        texts, model.feature_config, cache
    )
    u_tri = _segment_means(model.query_trigram, tri_flat, tri_counts)
    u_word = _segment_means(model.query_word, word_flat, word_counts)
    a = model.attn_vector.astype(np.float64)
    s_tri = u_tri @ a
    s_word = u_word @ a
    m = np.maximum(s_tri, s_word)
    e_tri = np.exp(s_tri - m)
    e_word = np.exp(s_word - m)
    denom = e_tri + e_word
    w_tri = e_tri / denom
    w_word = e_word / denom
    fused = w_tri[:, None] * u_tri + w_word[:, None] * u_word
    q_hat, norms = _normalize_rows(fused)
    q_hat[norms == 0.0] = 0.0
    return _QueryBatch(
        tri_flat, tri_counts, word_flat, word_counts,
        u_tri, u_word, w_tri, w_word, fused, norms, q_hat,
    )


def _query_backward(
    model: DualEncoderModel,
    batch: _QueryBatch,
    d_q_hat: np.ndarray,
    d_query_trigram: np.ndarray,
    d_query_word: np.ndarray,
) -> np.ndarray:
    """Backprop through normalize + fusion + pooling; returns d(attn)."""
    a = model.attn_vector.astype(np.float64)
    d_fused = _normalize_rows_backward(d_q_hat, batch.q_hat, batch.norms)
    dw_tri = np.sum(d_fused * batch.u_tri, axis=1)
    dw_word = np.sum(d_fused * batch.u_word, axis=1)
    mix = batch.w_tri * dw_tri + batch.w_word * dw_word
    ds_tri = batch.w_tri * (dw_tri - mix)
    ds_word = batch.w_word * (dw_word - mix)
    d_attn = batch.u_tri.T @ ds_tri + batch.u_word.T @ ds_word
    d_u_tri = batch.w_tri[:, None] * d_fused + ds_tri[:, None] * a[None, :]
    d_u_word = batch.w_word[:, None] * d_fused + ds_word[:, None] * a[None, :]
    _scatter_segment_grads(d_query_trigram, d_u_tri, batch.tri_flat, batch.tri_counts)
    _scatter_segment_grads(d_query_word, d_u_word, batch.word_flat, batch.word_counts)
    return d_attn


# --- single-example loss (the gradient-check surface) ------------------------

def categorization_loss(
    model: DualEncoderModel, taxonomy: Taxonomy, query: str, target_node: int
) -> tuple[float, LossGrads]:
    """Cross-entropy of one query against all taxonomy nodes, with sparse
    gradients for every parameter the forward pass touched."""
    loss, ctx = _categorization_forward(model, taxonomy, query, target_node)
    (batch, cat, g_hat, g_norms, dz, q_hat) = ctx
    gamma = model.logit_scale

    d_q_hat = gamma * (dz @ g_hat)
    d_g_hat = gamma * np.outer(dz, q_hat)
    d_g = _normalize_rows_backward(d_g_hat, g_hat, g_norms)

    category_grads: dict[int, np.ndarray] = {}
    for i, ids in enumerate(cat.ids_per_node):
        if not len(ids):
            continue
        contribution = d_g[i] / len(ids)
        for row in ids.tolist():
            if row in category_grads:
                category_grads[row] = category_grads[row] + contribution
            else:
                category_grads[row] = contribution.copy()

    d_qt: dict[int, np.ndarray] = {}
    d_qw: dict[int, np.ndarray] = {}
    a = model.attn_vector.astype(np.float64)
    d_fused = _normalize_rows_backward(d_q_hat[None, :], batch.q_hat, batch.norms)
    dw_tri = float(np.sum(d_fused * batch.u_tri))
    dw_word = float(np.sum(d_fused * batch.u_word))
    mix = batch.w_tri[0] * dw_tri + batch.w_word[0] * dw_word
    ds_tri = batch.w_tri[0] * (dw_tri - mix)
    ds_word = batch.w_word[0] * (dw_word - mix)
    d_attn = ds_tri * batch.u_tri[0] + ds_word * batch.u_word[0]
    d_u_tri = batch.w_tri[0] * d_fused[0] + ds_tri * a
    d_u_word = batch.w_word[0] * d_fused[0] + ds_word * a
    for rows, du, counts, out in (
        (batch.tri_flat, d_u_tri, batch.tri_counts, d_qt),
        (batch.word_flat, d_u_word, batch.word_counts, d_qw),
    ):
        if counts[0] == 0:
            continue
        contribution = du / counts[0]
        for row in rows.tolist():
            if row in out:
                out[row] = out[row] + contribution
            else:
                out[row] = contribution.copy()

    return loss, LossGrads(d_qt, d_qw, d_attn, category_grads)


def _categorization_forward(
    model: DualEncoderModel, taxonomy: Taxonomy, query: str, target_node: int
):
    text = normalize(query)
    if not text:
        raise ValueError("degenerate (empty) query")
    if target_node not in taxonomy.nodes:
        raise KeyError(f"target node {target_node} not in taxonomy")
    cat = _category_features(taxonomy, model.feature_config)
    g = _segment_means(model.category, cat.flat, cat.counts)
    g_hat, g_norms = _normalize_rows(g)
    batch = _query_forward(model, [text], {})
    if batch.norms[0] == 0.0:
        raise ValueError("degenerate query embedding")
    q_hat = batch.q_hat[0]
    logits = model.logit_scale * (g_hat @ q_hat)
    target_pos = taxonomy.position_of[target_node]
    loss, dz = softmax_cross_entropy(logits, target_pos)
    return loss, (batch, cat, g_hat, g_norms, dz, q_hat)


def _loss_value(model: DualEncoderModel, taxonomy: Taxonomy, query: str, target_node: int) -> float:
    loss, _ = _categorization_forward(model, taxonomy, query, target_node)
    return loss


# --- training loops -----------------------------------------------------------

class _Sgd:
    """Momentum SGD over the four parameter blocks (plus extras)."""

    def __init__(self, params: list[np.ndarray], learning_rate: float, momentum: float) -> None:
        self.params = params
        self.velocity = [np.zeros_like(p) for p in params]
        self.lr = learning_rate
        self.mu = momentum

    def step(self, grads: list[np.ndarray]) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.mu
            v += g.astype(p.dtype)
            p -= self.lr * v


class _CategorizationTrainer:
    def __init__(self, model: DualEncoderModel, taxonomy: Taxonomy, config: TrainConfig) -> None:
        self.model = model
        self.cat = _category_features(taxonomy, model.feature_config)
        self.gamma = config.logit_scale if config.logit_scale is not None else model.logit_scale
        self.cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.d_qt = np.zeros(model.query_trigram.shape, dtype=np.float64)
        self.d_qw = np.zeros(model.query_word.shape, dtype=np.float64)
        self.d_cat = np.zeros(model.category.shape, dtype=np.float64)
        self.opt = _Sgd(
            [model.query_trigram, model.query_word, model.attn_vector, model.category],
            config.learning_rate,
            config.momentum,
        )

    def step(self, texts: Sequence[str], target_positions: np.ndarray) -> float:
        model = self.model
        n = len(texts)
        g = _segment_means(model.category, self.cat.flat, self.cat.counts)
        g_hat, g_norms = _normalize_rows(g)
        batch = _query_forward(model, texts, self.cache)
        z = self.gamma * (batch.q_hat @ g_hat.T)
        m = z.max(axis=1, keepdims=True)
        exp = np.exp(z - m)
        total = exp.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        loss = float(np.mean(np.log(total[:, 0]) + m[:, 0] - z[rows, target_positions]))
        dz = exp / total
        dz[rows, target_positions] -= 1.0
        dz /= n

        d_q_hat = self.gamma * (dz @ g_hat)
        d_g_hat = self.gamma * (dz.T @ batch.q_hat)
        d_g = _normalize_rows_backward(d_g_hat, g_hat, g_norms)

        self.d_qt.fill(0.0)
        self.d_qw.fill(0.0)
        self.d_cat.fill(0.0)
        _scatter_segment_grads(self.d_cat, d_g, self.cat.flat, self.cat.counts)
        d_attn = _query_backward(model, batch, d_q_hat, self.d_qt, self.d_qw)
        self.opt.step([self.d_qt, self.d_qw, d_attn, self.d_cat])
        return loss


def train_categorizer(
    model: DualEncoderModel,
    pairs: Sequence[TrainingPair],
    taxonomy: Taxonomy,
    config: TrainConfig,
) -> tuple[DualEncoderModel, list[float]]:
    """Weighted SGD over aggregated pairs; returns the model (mutated in
    place) and the per-epoch mean loss curve.

    Pair weight acts as sample multiplicity.  The target of a pair is the
    terminal node of its path.  Degenerate (empty-text) pairs are skipped;
    if every pair is degenerate the run refuses with a diagnostic.
    """
    if not pairs:
        raise ValueError("no training pairs")
    usable: list[TrainingPair] = []
    n_degenerate = 0
    for pair in pairs:
        if normalize(pair.query):
            usable.append(pair)
        else:
            n_degenerate += 1
        if pair.weight < 1:
            raise ValueError(f"pair weight must be >= 1, got {pair.weight}")
    if not usable:
        raise ValueError(f"all {n_degenerate} training pairs have degenerate (empty) queries")

    texts = [normalize(p.query) for p in usable]
    targets = np.asarray(
        [taxonomy.position_of[p.path.terminal] for p in usable], dtype=np.int64
    )
    weights = np.asarray([p.weight for p in usable], dtype=np.int64)
    expanded = np.repeat(np.arange(len(usable)), weights)

    trainer = _CategorizationTrainer(model, taxonomy, config)
    rng = np.random.default_rng(config.seed)
    curve: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(expanded)
        total_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_texts = [texts[i] for i in idx]
            loss = trainer.step(batch_texts, targets[idx])
            total_loss += loss * len(idx)
        curve.append(total_loss / len(order))
    return model, curve


def pretrain_query_tower(
    model: DualEncoderModel,
    pairs: Sequence[PretrainPair],
    config: TrainConfig,
) -> tuple[DualEncoderModel, list[float]]:
    """Retrieval pre-training with in-batch negatives.

    Each batch scores every query against every product encoding in the
    batch (scaled cosine); the positives sit on the diagonal.  Products go
    through a throwaway embedding-bag tower that is discarded afterwards:
    only the query tower and fusion parameters carry over.
    """
    if config.batch_size < 2:
        raise ValueError("pre-training needs batch_size >= 2 for in-batch negatives")
    usable = [
        p for p in pairs if normalize(p.query) and normalize(p.product_text)
    ]
    if not usable:
        raise ValueError("no usable pre-training pairs")
    if len(usable) < 2:
        raise ValueError("in-batch negatives need at least 2 pairs")

    gamma = config.logit_scale if config.logit_scale is not None else model.logit_scale
    fc = model.feature_config
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(model.dim)
    product_table = rng.uniform(-bound, bound, size=(fc.trigram_buckets, model.dim)).astype(
        np.float32
    )

    query_texts = [normalize(p.query) for p in usable]
    product_texts = [normalize(p.product_text) for p in usable]
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    product_bags = [
        np.asarray(trigram_features(t, fc).ids, dtype=np.int64) for t in product_texts
    ]

    d_qt = np.zeros(model.query_trigram.shape, dtype=np.float64)
    d_qw = np.zeros(model.query_word.shape, dtype=np.float64)
    d_prod = np.zeros(product_table.shape, dtype=np.float64)
    opt = _Sgd(
        [model.query_trigram, model.query_word, model.attn_vector, product_table],
        config.learning_rate,
        config.momentum,
    )

    curve: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(usable))
        total_loss = 0.0
        n_seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # a singleton batch has no negatives
            batch_q = [query_texts[i] for i in idx]
            bags = [product_bags[i] for i in idx]
            counts = np.asarray([len(b) for b in bags], dtype=np.int64)
            flat = np.concatenate(bags) if counts.sum() else np.zeros(0, dtype=np.int64)

            qb = _query_forward(model, batch_q, cache)
            prod = _segment_means(product_table, flat, counts)
            p_hat, p_norms = _normalize_rows(prod)
            n = len(idx)
            z = gamma * (qb.q_hat @ p_hat.T)
            m = z.max(axis=1, keepdims=True)
            exp = np.exp(z - m)
            total = exp.sum(axis=1, keepdims=True)
            rows = np.arange(n)
            loss = float(np.mean(np.log(total[:, 0]) + m[:, 0] - z[rows, rows]))
            dz = exp / total
            dz[rows, rows] -= 1.0
            dz /= n

            d_q_hat = gamma * (dz @ p_hat)
            d_p_hat = gamma * (dz.T @ qb.q_hat)
            d_p = _normalize_rows_backward(d_p_hat, p_hat, p_norms)

            d_qt.fill(0.0)
            d_qw.fill(0.0)
            d_prod.fill(0.0)
            _scatter_segment_grads(d_prod, d_p, flat, counts)
            d_attn = _query_backward(model, qb, d_q_hat, d_qt, d_qw)
            opt.step([d_qt, d_qw, d_attn, d_prod])
            total_loss += loss * n
            n_seen += n
        curve.append(total_loss / n_seen if n_seen else float("nan"))
    return model, curve


# --- gradient verification ------------------------------------------------------

def grad_check(
    model: DualEncoderModel,
    taxonomy: Taxonomy,
    n_probes: int = 20,
    epsilon: float = 1e-4,
    seed: int = 0,
    query: str | None = None,
    target_node: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes are drawn from every parameter block the forward pass touches:
    query trigram rows, query word rows, fusion vector entries, and
    category rows.  Perturbations are applied in the parameters' own
    float32 grid and the realized step is measured exactly.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    if query is None:
        node = int(taxonomy.node_order[rng.integers(len(taxonomy))])
        query = category_text(taxonomy, node).replace("//", " ")
    if target_node is None:
        target_node = int(taxonomy.node_order[rng.integers(len(taxonomy))])

    _, grads = categorization_loss(model, taxonomy, query, target_node)

    pools: list[tuple[np.ndarray, dict[int, np.ndarray] | np.ndarray, list[int]]] = [
        (model.query_trigram, grads.query_trigram, sorted(grads.query_trigram)),
        (model.query_word, grads.query_word, sorted(grads.query_word)),
        (model.attn_vector, grads.attn_vector, list(range(model.dim))),
        (model.category, grads.category, sorted(grads.category)),
    ]
    probes: list[tuple[np.ndarray, tuple[int, ...], float]] = []
    pool_idx = 0
    while len(probes) < n_probes:
        table, grad, rows = pools[pool_idx % len(pools)]
        pool_idx += 1
        if not rows:
            continue
        if table.ndim == 1:
            col = int(rng.choice(rows))
            probes.append((table, (col,), float(grad[col])))
        else:
            row = int(rows[rng.integers(len(rows))])
            col = int(rng.integers(table.shape[1]))
            probes.append((table, (row, col), float(grad[row][col])))

    max_err = 0.0
    for table, index, analytic in probes:
        original = table[index]
        hi = np.float32(float(original) + epsilon)
        lo = np.float32(float(original) - epsilon)
        table[index] = hi
        loss_hi = _loss_value(model, taxonomy, query, target_node)
        table[index] = lo
        loss_lo = _loss_value(model, taxonomy, query, target_node)
        table[index] = original
        numeric = (loss_hi - loss_lo) / (float(hi) - float(lo))
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err


def write_loss_curve(path: str | Path, curve: Iterable[float]) -> None:
    """CSV loss curve: ``epoch,loss`` with a header row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(curve, start=1):
            fh.write(f"{epoch},{loss!r}\n")
