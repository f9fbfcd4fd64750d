"""Per-level micro-F1 / acc@5 metrics, terminal-depth histograms, and the
training-vs-prediction-vs-truth de-biasing comparison report.

At reporting depth d a query counts only if its true path reaches depth d.
The top-1 prediction is truncated to depth d when deep enough, otherwise
the query abstains there: abstention hurts recall but not precision, so a
model that legitimately stops shallow on vague queries is not punished
twice.  acc@5 always ranks five unthresholded candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .inference import BeamConfig, beam_search, hier_infer
from .model import DualEncoderModel, ScoreMap, build_category_table, encode_query, is_degenerate, score_with_table
from .taxonomy import CategoryPath, Taxonomy, parse_path, truncate_path


@dataclass
class LabeledQuery:
    """A rated query with its true category path."""

    query: str
    true_path: CategoryPath


@dataclass
class LevelMetrics:
    precision: float
    recall: float
    f1: float
    acc_at_5: float
    n_evaluable: int
    n_predicted: int
    n_correct: int
    n_abstained: int
    n_hits_at_5: int


@dataclass
class MetricsReport:
    per_level: dict[int, LevelMetrics]
    n_queries: int

    def to_json_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "levels": {
                str(d): {
                    "micro_precision": m.precision,
                    "micro_recall": m.recall,
                    "micro_f1": m.f1,
                    "acc_at_5": m.acc_at_5,
                    "n_evaluable": m.n_evaluable,
                    "n_predicted": m.n_predicted,
                    "n_correct": m.n_correct,
                    "n_abstained": m.n_abstained,
                    "n_hits_at_5": m.n_hits_at_5,
                }
                for d, m in sorted(self.per_level.items())
            },
        }


@dataclass
class LevelHistogram:
    """Relative frequency of terminal depths; frequencies sum to one."""

    freqs: dict[int, float]
    source: str


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def metrics_from_predictions(
    taxonomy: Taxonomy,
    truths: Sequence[CategoryPath],
    top1_paths: Sequence[CategoryPath | None],
    top5_paths: Sequence[Sequence[CategoryPath]],
) -> MetricsReport:
    """Pure metric arithmetic over already-computed predictions."""
    if not (len(truths) == len(top1_paths) == len(top5_paths)):
        raise ValueError("truths and predictions must align")
    per_level: dict[int, LevelMetrics] = {}
    for depth in range(1, taxonomy.max_depth + 1):
        n_evaluable = n_predicted = n_correct = n_hits = 0
        for truth, top1, top5 in zip(truths, top1_paths, top5_paths):
            truth_d = truncate_path(truth, depth)
            if truth_d is None:
                continue
            n_evaluable += 1
            pred_d = truncate_path(top1, depth) if top1 is not None else None
            if pred_d is not None:
                n_predicted += 1
                if pred_d.node_ids == truth_d.node_ids:
                    n_correct += 1
            for candidate in top5:
                cand_d = truncate_path(candidate, depth)
                if cand_d is not None and cand_d.node_ids == truth_d.node_ids:
                    n_hits += 1
                    break
        precision = n_correct / n_predicted if n_predicted else 0.0
        recall = n_correct / n_evaluable if n_evaluable else 0.0
        per_level[depth] = LevelMetrics(
            precision=precision,
            recall=recall,
            f1=_f1(precision, recall),
            acc_at_5=n_hits / n_evaluable if n_evaluable else 0.0,
            n_evaluable=n_evaluable,
            n_predicted=n_predicted,
            n_correct=n_correct,
            n_abstained=n_evaluable - n_predicted,
            n_hits_at_5=n_hits,
        )
    return MetricsReport(per_level=per_level, n_queries=len(truths))


def evaluate(
    model: DualEncoderModel,
    taxonomy: Taxonomy,
    labeled: Sequence[LabeledQuery],
    beam_config: BeamConfig,
    logit_scale: float | None = None,
) -> MetricsReport:
    """Score every labeled query and aggregate per-level metrics.

    F1 uses the top-1 path under the configured beam (thresholds apply);
    acc@5 uses an unthresholded width-5 beam so five full candidates exist.
    """
    if not labeled:
        raise ValueError("labeled set is empty")
    scale = model.logit_scale if logit_scale is None else logit_scale
    table = build_category_table(model, taxonomy, model_version="")
    top5_config = BeamConfig(width=5, thresholds={}, alpha=beam_config.alpha)

    truths: list[CategoryPath] = []
    top1_paths: list[CategoryPath | None] = []
    top5_paths: list[list[CategoryPath]] = []
    for item in labeled:
        truths.append(item.true_path)
        qvec = encode_query(model, item.query)
        if is_degenerate(qvec):
            top1_paths.append(None)
            top5_paths.append([])
            continue
        normalized = hier_infer(
            taxonomy, score_with_table(table, qvec), alpha=beam_config.alpha, logit_scale=scale
        )
        ranked = beam_search(taxonomy, normalized, beam_config)
        top1_paths.append(ranked[0].path if ranked else None)
        top5_paths.append([p.path for p in beam_search(taxonomy, normalized, top5_config)])
    return metrics_from_predictions(taxonomy, truths, top1_paths, top5_paths)


def flat_top_paths(taxonomy: Taxonomy, raw: ScoreMap, k: int = 5) -> list[CategoryPath]:
    """Baseline ranking with no hierarchical step: the k best nodes by raw
    cosine, each expanded to its root path.  Ties break by node id."""
    order = sorted(
        zip(raw.node_ids.tolist(), raw.values.tolist()), key=lambda t: (-t[1], t[0])
    )
    return [taxonomy.path_to(nid) for nid, _ in order[:k]]


def level_distribution(paths: Sequence[CategoryPath], source: str = "") -> LevelHistogram:
    """Histogram of terminal depths, normalized to sum to one."""
    if not paths:
        raise ValueError("no paths to histogram")
    counts: dict[int, int] = {}
    for path in paths:
        counts[len(path)] = counts.get(len(path), 0) + 1
    total = len(paths)
    return LevelHistogram({d: c / total for d, c in sorted(counts.items())}, source)


def total_variation(a: LevelHistogram, b: LevelHistogram) -> float:
    depths = set(a.freqs) | set(b.freqs)
    return 0.5 * sum(abs(a.freqs.get(d, 0.0) - b.freqs.get(d, 0.0)) for d in depths)


@dataclass
class DebiasReport:
    """How much closer predictions sit to the truth's depth profile than
    the training labels do (total-variation distance)."""

    tv_prediction_truth: float
    tv_training_truth: float
    rows: list[tuple[int, float, float, float]]  # depth, train, pred, truth

    def to_csv_text(self) -> str:
        lines = ["depth,train_freq,pred_freq,truth_freq"]
        for depth, train, pred, truth in self.rows:
            lines.append(f"{depth},{train!r},{pred!r},{truth!r}")
        return "\n".join(lines) + "\n"


def debias_report(
    training_hist: LevelHistogram,
    prediction_hist: LevelHistogram,
    truth_hist: LevelHistogram,
) -> DebiasReport:
    depths = sorted(set(training_hist.freqs) | set(prediction_hist.freqs) | set(truth_hist.freqs))
    rows = [
        (
            d,
            training_hist.freqs.get(d, 0.0),
            prediction_hist.freqs.get(d, 0.0),
            truth_hist.freqs.get(d, 0.0),
        )
        for d in depths
    ]
    return DebiasReport(
        tv_prediction_truth=total_variation(prediction_hist, truth_hist),
        tv_training_truth=total_variation(training_hist, truth_hist),
        rows=rows,
    )


def read_labeled_tsv(path: str | Path, taxonomy: Taxonomy) -> list[LabeledQuery]:
    """TSV ``query<TAB>path_text`` with an optional ignored locale column."""
    labeled = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}: line {lineno}: expected 2 or 3 fields")
            labeled.append(LabeledQuery(parts[0], parse_path(taxonomy, parts[1])))
    return labeled


def write_metrics_json(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
