"""Ranking metrics, PR-curve export, and the rule-group ablation protocol.

PR-AUC is computed as average precision with tie blocks sharing the precision
at the block end: every positive in a run of equal scores contributes
(# positives with score >= s) / (# samples with score >= s). This keeps the
estimator free of interpolation and makes the all-ties case return prevalence.
Ranking ties always break on ascending row index.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .alignment import AlignmentConfig
from .detector import DetectorConfig, hybrid_train, score
from .encoders import EncoderModel, PretrainConfig, pretrain
from .errors import ParseError, ShapeError, UndefinedMetricError, ValidationError
from .features import build_feature_matrix
from .ingest import ClaimsTable, LabelTable
from .io_utils import atomic_write_text, fmt_float
from .rules import KINDS, RuleSet
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 20, 50, 100)

R_AT_K_NOTE = "# r_at_k denominator: all positive labels in the evaluated set"


def _check_eval_input(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.ndim != 1 or s.ndim != 1 or y.shape != s.shape:
        raise ShapeError(f"labels {y.shape} and scores {s.shape} must be equal 1-D")
    if y.size == 0:
        raise ValidationError("metrics are undefined on empty inputs")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    return y.astype(np.int64), s


def _rank_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties broken by ascending index."""
    return np.lexsort((np.arange(scores.size), -scores))


def pr_auc(labels, scores) -> float:
    """Average precision with block-end tie handling.

    Positives are ranked by descending score; each positive contributes the
    precision taken at the end of its tie block, and the contributions are
    summed exactly (math.fsum) before dividing by the positive count.
    """
    y, s = _check_eval_input(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive label")
    order = _rank_order(s)
    sorted_s = s[order]
    sorted_y = y[order]
    cum_pos = np.cumsum(sorted_y)
    n = y.size
    is_block_end = np.append(sorted_s[1:] != sorted_s[:-1], True)
    block_end_positions = np.flatnonzero(is_block_end)
    block_end = block_end_positions[
        np.searchsorted(block_end_positions, np.arange(n), side="left")
    ]
    positive_positions = np.flatnonzero(sorted_y == 1)
    ends = block_end[positive_positions]
    contributions = [int(cum_pos[e]) / int(e + 1) for e in ends]
    return math.fsum(contributions) / n_pos


def recall_at_k(labels, scores, k: int) -> float:
    """Fraction of all positives found in the top k rows by descending score."""
    y, s = _check_eval_input(labels, scores)
    if not 1 <= k <= y.size:
        raise ValidationError(f"k must be in [1, {y.size}], got {k}")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("recall_at_k needs at least one positive label")
    top = _rank_order(s)[:k]
    return int(y[top].sum()) / n_pos


def prf_at_threshold(labels, scores, threshold: float) -> dict[str, float]:
    """Precision, recall, and F1 flagging scores strictly above the threshold.

    Division-by-zero conventions: precision is 0 when nothing is flagged,
    recall is 0 when there are no positives, F1 is 0 when both are 0.
    """
    y, s = _check_eval_input(labels, scores)
    flagged = s > threshold
    tp = int((flagged & (y == 1)).sum())
    n_flagged = int(flagged.sum())
    n_pos = int(y.sum())
    precision = tp / n_flagged if n_flagged else 0.0
    recall = tp / n_pos if n_pos else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


@dataclass
class PrCurve:
    """One point per distinct score, flagging everything at or above it."""

    thresholds: np.ndarray
    precisions: np.ndarray
    recalls: np.ndarray

    def __post_init__(self):
        if not (
            self.thresholds.shape == self.precisions.shape == self.recalls.shape
        ) or self.thresholds.ndim != 1:
            raise ShapeError("curve arrays must be equal-length 1-D")
        if np.any(np.diff(self.recalls) < 0):
            raise ValidationError("recall must be non-decreasing along the curve")


def pr_curve(labels, scores) -> PrCurve:
    """Precision/recall at every distinct score threshold, descending."""
    y, s = _check_eval_input(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr_curve needs at least one positive label")
    order = _rank_order(s)
    sorted_s = s[order]
    cum_pos = np.cumsum(y[order])
    ends = np.flatnonzero(np.append(sorted_s[1:] != sorted_s[:-1], True))
    tp = cum_pos[ends].astype(np.float64)
    flagged = (ends + 1).astype(np.float64)
    return PrCurve(
        thresholds=sorted_s[ends].copy(),
        precisions=tp / flagged,
        recalls=tp / n_pos,
    )


@dataclass
class EvalResult:
    pr_auc: float
    r_at_k: dict[int, float]
    precision: float
    recall: float
    f1: float


def evaluate_scores(
    labels, scores, ks: tuple[int, ...] = DEFAULT_KS, threshold: float = 0.5
) -> EvalResult:
    """All ranking metrics for one score vector."""
    prf = prf_at_threshold(labels, scores, threshold)
    return EvalResult(
        pr_auc=pr_auc(labels, scores),
        r_at_k={int(k): recall_at_k(labels, scores, int(k)) for k in ks},
        precision=prf["precision"],
        recall=prf["recall"],
        f1=prf["f1"],
    )


@dataclass
class MetricsRow:
    config: str
    seed: int
    result: EvalResult


@dataclass
class DeltaRow:
    """Metric drop of one configuration relative to the full run, same seed."""

    config: str
    seed: int
    d_pr_auc: float
    d_r_at_k: dict[int, float]


@dataclass
class AblationReport:
    rows: list[MetricsRow]
    deltas: list[DeltaRow]
    notes: list[str] = field(default_factory=list)
    ks: tuple[int, ...] = DEFAULT_KS


def split_labels(
    labels: LabelTable, eval_fraction: float, seed: int
) -> tuple[LabelTable, LabelTable]:
    """Stratified (train, eval) split of the labeled prescribers.

    Positives and negatives are permuted and split separately so both sides
    keep at least one of each class; requires two of each when splitting.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValidationError("eval fraction must lie strictly between 0 and 1")
    rng = nn.make_rng(seed)
    eval_ids: list[int] = []
    for value in (1, 0):
        ids = labels.idx[labels.labels == value]
        if ids.size < 2:
            raise ValidationError(
                "stratified split needs at least two labeled prescribers per class"
            )
        count = int(round(eval_fraction * ids.size))
        count = min(max(count, 1), ids.size - 1)
        eval_ids.extend(int(i) for i in ids[rng.permutation(ids.size)][:count])
    eval_table = labels.restrict(np.array(eval_ids, dtype=np.int64))
    train_ids = [int(i) for i in labels.idx if int(i) not in set(eval_ids)]
    train_table = labels.restrict(np.array(train_ids, dtype=np.int64))
    return train_table, eval_table


ABLATION_CONFIGS = ("full", "minus-cost", "minus-opioid", "lambda0")

GROUP_TO_CONFIG = {"cost_preference": "minus-cost", "opioid": "minus-opioid"}


def configs_for_groups(groups: tuple[str, ...]) -> tuple[str, ...]:
    """Configuration names for a selection of droppable rule groups."""
    for group in groups:
        if group not in GROUP_TO_CONFIG:
            raise ValidationError(f"unknown ablation group {group!r}")
    if len(set(groups)) != len(groups):
        raise ValidationError("ablation groups must be distinct")
    return ("full",) + tuple(GROUP_TO_CONFIG[g] for g in groups) + ("lambda0",)


def _ablation_ruleset(name: str, ruleset: RuleSet) -> RuleSet | None:
    """Cost-preference rules are the binary pairs; opioid rules are unary."""
    if name in ("full", "lambda0"):
        return ruleset
    drop_kind = "binary" if name == "minus-cost" else "unary"
    assert drop_kind in KINDS
    return ruleset.subset(lambda rule: rule.kind != drop_kind)


def _run_configuration(
    name: str,
    claims: ClaimsTable,
    ruleset: RuleSet,
    train_labels: LabelTable,
    eval_labels: LabelTable,
    pretrain_cfg: PretrainConfig,
    align_cfg: AlignmentConfig,
    detector_cfg: DetectorConfig,
    seed: int,
    ks: tuple[int, ...],
    threshold: float,
) -> EvalResult:
    features = build_feature_matrix(claims, ruleset)
    lam_zero = name == "lambda0"
    cfg = dataclasses.replace(detector_cfg, lam=0.0) if lam_zero else detector_cfg
    encoders = None
    if not lam_zero:
        re, se, _ = pretrain(ruleset, pretrain_cfg, nn.derive_seed(seed, "pretrain"))
        encoders = EncoderModel(
            re=re,
            se=se,
            latent_dim=pretrain_cfg.latent_dim,
            index_dim=pretrain_cfg.index_dim,
            ruleset_fingerprint=ruleset.fingerprint(),
        )
    model, _ = hybrid_train(
        features.values,
        train_labels,
        cfg,
        nn.derive_seed(seed, "detector"),
        encoders=encoders,
        ruleset=None if lam_zero else ruleset,
        align_cfg=align_cfg,
    )
    scores = score(model, features.values).scores
    y_eval = eval_labels.labels
    s_eval = scores[eval_labels.idx]
    return evaluate_scores(y_eval, s_eval, ks, threshold)


def ablation_run(
    claims: ClaimsTable,
    labels: LabelTable,
    ruleset: RuleSet,
    pretrain_cfg: PretrainConfig | None = None,
    align_cfg: AlignmentConfig | None = None,
    detector_cfg: DetectorConfig | None = None,
    seeds: tuple[int, ...] = (0,),
    ks: tuple[int, ...] = DEFAULT_KS,
    threshold: float = 0.5,
    eval_fraction: float = 0.0,
    groups: tuple[str, ...] = ("cost_preference", "opioid"),
) -> AblationReport:
    """Retrain encoders and detector per rule subset and report metric drops.

    Configurations: full rule set, one minus-configuration per selected group
    (cost-preference pairs, opioid single-drug rules), and lambda = 0
    (alignment off, full features). Every configuration reuses the same
    derived stage seeds per run seed, so differences come from the rules
    alone. A subset that would leave no rules is skipped with a note. With
    eval_fraction > 0 the labeled set is split and metrics are computed on
    the held-out part only; otherwise on all labeled prescribers.
    """
    config_names = configs_for_groups(tuple(groups))
    pretrain_cfg = pretrain_cfg if pretrain_cfg is not None else PretrainConfig()
    align_cfg = align_cfg if align_cfg is not None else AlignmentConfig()
    detector_cfg = detector_cfg if detector_cfg is not None else DetectorConfig()
    if labels.n_labeled == 0:
        raise ValidationError("ablation needs labeled prescribers")
    rows: list[MetricsRow] = []
    deltas: list[DeltaRow] = []
    notes: list[str] = []
    for seed in seeds:
        if eval_fraction > 0.0:
            train_labels, eval_labels = split_labels(
                labels, eval_fraction, nn.derive_seed(seed, "split")
            )
        else:
            train_labels, eval_labels = labels, labels
        full_result: EvalResult | None = None
        for name in config_names:
            sub = _ablation_ruleset(name, ruleset)
            if sub is None:
                note = f"{name} seed {seed}: skipped, no rules remain"
                notes.append(note)
                logger.warning(note)
                continue
            result = _run_configuration(
                name,
                claims,
                sub,
                train_labels,
                eval_labels,
                pretrain_cfg,
                align_cfg,
                detector_cfg,
                int(seed),
                ks,
                threshold,
            )
            rows.append(MetricsRow(config=name, seed=int(seed), result=result))
            if name == "full":
                full_result = result
            elif full_result is not None:
                deltas.append(
                    DeltaRow(
                        config=name,
                        seed=int(seed),
                        d_pr_auc=full_result.pr_auc - result.pr_auc,
                        d_r_at_k={
                            k: full_result.r_at_k[k] - result.r_at_k[k] for k in ks
                        },
                    )
                )
    return AblationReport(rows=rows, deltas=deltas, notes=notes, ks=ks)


def _report_header(ks: tuple[int, ...]) -> list[str]:
    return ["config", "seed", "pr_auc", *[f"r@{k}" for k in ks], "precision", "recall", "f1"]


def write_report_csv(path, rows: list[MetricsRow], ks: tuple[int, ...] = DEFAULT_KS,
                     deltas: list[DeltaRow] | None = None) -> None:
    """Metrics report CSV; metric drops (vs full) go in trailing comment lines."""
    lines = [R_AT_K_NOTE, ",".join(_report_header(ks))]
    for row in rows:
        r = row.result
        cells = [row.config, str(row.seed), fmt_float(r.pr_auc)]
        cells += [fmt_float(r.r_at_k[k]) for k in ks]
        cells += [fmt_float(r.precision), fmt_float(r.recall), fmt_float(r.f1)]
        lines.append(",".join(cells))
    for delta in deltas or []:
        parts = [f"pr_auc={fmt_float(delta.d_pr_auc)}"]
        parts += [f"r@{k}={fmt_float(delta.d_r_at_k[k])}" for k in ks]
        lines.append(
            f"# delta vs full: config={delta.config} seed={delta.seed} " + " ".join(parts)
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_pr_curve_csv(path, curve: PrCurve) -> None:
    lines = ["threshold,precision,recall"]
    for t, p, r in zip(curve.thresholds, curve.precisions, curve.recalls):
        lines.append(f"{fmt_float(t)},{fmt_float(p)},{fmt_float(r)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


SCORES_HEADER = ["npi", "score", "rank"]


def write_scores_csv(path, npis: list[str], scores: np.ndarray, ranks: np.ndarray) -> None:
    lines = [",".join(SCORES_HEADER)]
    for npi, s, rank in zip(npis, scores, ranks):
        lines.append(f"{npi},{fmt_float(float(s))},{int(rank)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_scores_csv(path, prescribers: Vocabulary | None = None) -> tuple[list[str], np.ndarray]:
    """Read npi,score rows (a trailing rank column is accepted and ignored).

    Returns the npis in file order with their scores; when a vocabulary is
    given, every npi must belong to it.
    """
    npis: list[str] = []
    scores: list[float] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header not in (SCORES_HEADER, SCORES_HEADER[:2]):
            raise ParseError(f"{path}: line 1: expected header npi,score[,rank]")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields")
            npi = row[0]
            if npi in seen:
                raise ParseError(f"{path}: line {lineno}: duplicate npi {npi!r}")
            seen.add(npi)
            try:
                value = float(row[1])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: score {row[1]!r} is not a number"
                ) from None
            if not math.isfinite(value):
                raise ParseError(f"{path}: line {lineno}: score must be finite")
            if prescribers is not None:
                prescribers.index(npi)
            npis.append(npi)
            scores.append(value)
    if not npis:
        raise ParseError(f"{path}: no score rows")
    return npis, np.array(scores, dtype=np.float64)
