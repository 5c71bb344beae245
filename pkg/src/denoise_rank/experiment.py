"""End-to-end comparison of user models on one dataset.

For each model: optionally train its parameters on the train split, tune
lambda (and the threshold, for thresholded variants) on the validation
split, then evaluate on the test split. The first-stage ranking is always
included as the reference row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .evaluation import degradation_count, fisher_randomization_test, format_ratio
from .rerank import FusionConfig
from .training import TrainingConfig, train
from .tuning import DEFAULT_GRID, grid_search, metric_rows, personalized_table, prepare, uses_threshold
from .types import (
    AdditiveParams,
    Alignment,
    AttentionConfig,
    Dataset,
    MultiHeadParams,
    Variant,
)
from . import gradients as gr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    attn: Optional[AttentionConfig]  # None = first stage only
    train: bool = True

    @property
    def alignment_label(self) -> str:
        if self.attn is None or self.attn.variant is Variant.MEAN:
            return "---"
        if self.attn.variant is Variant.MULTI_HEAD:
            return "ScaledDot"
        if self.attn.alignment is Alignment.SHIFTED_COSINE:
            return "Cosine-based"
        return self.attn.alignment.value


def default_attention(variant, alignment=None, dim: int = 64, heads: int = 4, seed: int = 0,
                      threshold: float = 0.5) -> AttentionConfig:
    """An AttentionConfig with sensible initial parameters for ``variant``."""
    variant = Variant(variant) if not isinstance(variant, Variant) else variant
    if alignment is None:
        alignment = {
            Variant.DENOISING: Alignment.SHIFTED_COSINE,
            Variant.DENOISING_SOFTMAX: Alignment.SHIFTED_COSINE,
        }.get(variant, Alignment.SCALED_DOT)
    alignment = Alignment(alignment) if not isinstance(alignment, Alignment) else alignment
    kwargs = {}
    if alignment is Alignment.ADDITIVE:
        kwargs["additive_params"] = AdditiveParams.init(dim, seed=seed)
    if variant is Variant.MULTI_HEAD:
        kwargs["multihead_params"] = MultiHeadParams.init(dim, heads)
        kwargs["heads"] = heads
    cfg = AttentionConfig(variant=variant, alignment=alignment, **kwargs)
    return cfg.with_threshold(threshold)


def table2_specs(dim: int, heads: int = 4, seed: int = 0) -> List[ModelSpec]:
    specs = [ModelSpec("Mean", default_attention(Variant.MEAN, dim=dim))]
    for variant, label in ((Variant.SOFTMAX, "Attention"), (Variant.ZERO_ATTENTION, "Zero Attention")):
        for align in (Alignment.ADDITIVE, Alignment.COSINE, Alignment.SCALED_DOT):
            specs.append(ModelSpec(label, default_attention(variant, align, dim=dim, seed=seed)))
    specs.append(ModelSpec("Multi-Head", default_attention(Variant.MULTI_HEAD, dim=dim, heads=heads)))
    specs.append(ModelSpec("Denoising", default_attention(Variant.DENOISING, dim=dim)))
    return specs


def ablation_specs(dim: int) -> List[ModelSpec]:
    return [
        ModelSpec("Attention", default_attention(Variant.SOFTMAX, Alignment.SCALED_DOT, dim=dim)),
        ModelSpec("Filter Attention", default_attention(Variant.FILTER_ATTENTION, Alignment.SCALED_DOT, dim=dim)),
        ModelSpec("Denoising Softmax", default_attention(Variant.DENOISING_SOFTMAX, dim=dim)),
        ModelSpec("Denoising", default_attention(Variant.DENOISING, dim=dim)),
    ]


@dataclass
class ModelResult:
    spec: ModelSpec
    attn: Optional[AttentionConfig]
    lam: float
    threshold: Optional[float]
    means: Dict[str, float]
    per_query: Dict[str, np.ndarray]
    loss_trace: List[float] = field(default_factory=list)
    degradations: int = 0
    degradation_ratio: float = 0.0
    markers: str = ""


@dataclass
class ComparisonResult:
    rows: List[ModelResult]
    query_ids: List[str]
    significance: Dict[tuple, float] = field(default_factory=dict)

    def row(self, name: str, alignment: Optional[str] = None) -> ModelResult:
        for r in self.rows:
            if r.spec.name == name and (alignment is None or r.spec.alignment_label == alignment):
                return r
        raise KeyError(f"no row {name!r} / {alignment!r}")

    def to_tsv(self) -> str:
        lines = ["model\talignment\tMAP@100\tMRR@10\tNDCG@10\tlambda\tsigma(t)\tdegraded"]
        for r in self.rows:
            thr = "---" if r.threshold is None else f"{r.threshold:g}"
            lam = "---" if r.spec.attn is None else f"{r.lam:g}"
            deg = "---" if r.spec.attn is None else f"{r.degradations} ({format_ratio(r.degradation_ratio)})"
            lines.append(
                f"{r.spec.name}\t{r.spec.alignment_label}\t"
                f"{r.means['map100']:.4f}{r.markers}\t{r.means['mrr10']:.4f}\t{r.means['ndcg10']:.4f}\t"
                f"{lam}\t{thr}\t{deg}"
            )
        return "\n".join(lines) + "\n"


def evaluate_fixed(dataset: Dataset, attn: Optional[AttentionConfig], lam: float,
                   normalize: bool = True) -> Dict[str, Dict[str, float]]:
    """Per-query metrics of one fixed (attention, lambda) setting."""
    prepared = prepare(dataset)
    qids = [p.query_id for p in prepared]
    if attn is None:
        b_table = {qid: np.zeros(len(dataset.candidates[qid])) for qid in qids}
        lam = 0.0
    else:
        b_table = personalized_table(dataset, attn, qids)
    return metric_rows(dataset, prepared, b_table, FusionConfig(lam, normalize))


def fit_model(spec: ModelSpec, dataset: Dataset, training: Optional[TrainingConfig],
              grid_lambda=DEFAULT_GRID, grid_threshold=DEFAULT_GRID, metric: str = "map100",
              normalize: bool = True):
    """Train (if possible and requested), then grid-tune on the validation split."""
    attn = spec.attn
    trace: List[float] = []
    if attn is None:
        return None, 0.0, None, trace
    params = gr.trainable_params(attn)
    # a threshold-only model whose threshold the grid re-tunes gains nothing from training
    retuned = uses_threshold(attn) and bool(grid_threshold) and set(params) == {"t"}
    if training is not None and spec.train and params and not retuned:
        result = train(dataset.split("train"), training, attn)
        attn, trace = result.attn, result.loss_trace
    grid = grid_search(dataset.split("val"), grid_lambda, grid_threshold, attn, metric, normalize)
    if grid.best_threshold is not None:
        attn = attn.with_threshold(grid.best_threshold)
    return attn, grid.best_lambda, grid.best_threshold, trace


def compare(
    dataset: Dataset,
    specs: Sequence[ModelSpec],
    training: Optional[TrainingConfig] = None,
    grid_lambda=DEFAULT_GRID,
    grid_threshold=DEFAULT_GRID,
    metric: str = "map100",
    normalize: bool = True,
    alpha: float = 0.05,
    iterations: int = 100_000,
    seed: int = 0,
    include_first_stage: bool = True,
) -> ComparisonResult:
    """Fit every spec, evaluate on the test split and mark significant wins.

    Markers on MAP@100: ``*`` = significantly better than Mean, ``+`` =
    significantly better than every other (non first-stage) row, both under
    a Bonferroni-corrected randomization test over the baselines compared.
    """
    test = dataset.split("test")
    all_specs = ([ModelSpec("FirstStage", None)] if include_first_stage else []) + list(specs)
    rows: List[ModelResult] = []
    first_stage_ap = None
    qids: List[str] = []
    for spec in all_specs:
        log.info("fitting %s (%s)", spec.name, spec.alignment_label)
        attn, lam, thr, trace = fit_model(spec, dataset, training, grid_lambda, grid_threshold, metric, normalize)
        per = evaluate_fixed(test, attn, lam, normalize)
        qids = list(per)
        arrays = {m: np.array([per[q][k] for q in qids]) for m, k in
                  (("map100", "ap100"), ("mrr10", "rr10"), ("ndcg10", "ndcg10"))}
        res = ModelResult(spec, attn, lam, thr, {m: float(a.mean()) for m, a in arrays.items()}, arrays, trace)
        if spec.attn is None:
            first_stage_ap = arrays["map100"]
        elif first_stage_ap is not None:
            res.degradations, res.degradation_ratio = degradation_count(first_stage_ap, arrays["map100"])
        rows.append(res)
    out = ComparisonResult(rows, qids)
    personal = [r for r in rows if r.spec.attn is not None]
    mean_rows = [r for r in personal if r.spec.attn.variant is Variant.MEAN]
    comparisons = max(1, len(personal) - 1)
    for r in personal:
        others = [o for o in personal if o is not r]
        wins = {}
        for o in others:
            sig = fisher_randomization_test(r.per_query[metric], o.per_query[metric], iterations,
                                            alpha, comparisons, seed, metric)
            out.significance[(id(r), id(o))] = sig.p_value
            wins[id(o)] = sig.significant and sig.mean_difference > 0
        if mean_rows and r is not mean_rows[0] and wins.get(id(mean_rows[0])):
            r.markers += "*"
        if others and all(wins[id(o)] for o in others):
            r.markers += "+"
    return out


def p_value(result: ComparisonResult, a: ModelResult, b: ModelResult) -> float:
    return result.significance[(id(a), id(b))]
