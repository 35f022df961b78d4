"""Component-removal comparison grid over a planted world.

Each row retrains the pipeline with one component disabled and reports
per-type and micro-averaged classification metrics for both modalities,
in the usual two-block layout (Text rows, then Graph rows).  Rows share
the same data split and the same repetition seeds so numbers are
directly comparable; a cell that fails to train is marked failed and
the run continues.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import SCORERS, RunConfig, config_from_dict
from .errors import ConfigError, RemexError
from .evaluation import (EvalReport, ThresholdSet, compute_report,
                         scores_by_type)
from .training import (TrainData, cotrain, holdout_split, pretrain_graph,
                       pretrain_text, score_bags_eval, score_pairs_eval)

VARIANT_LABELS = {"remap": "REMAP", "remap_m": "REMAP-M",
                  "remap_b": "REMAP-B"}
SCORER_LABELS = {"linear": "linear", "transe": "TransE", "tucker": "TuckER"}


@dataclass(frozen=True)
class Toggle:
    """One disabled component; kind 'none' is the full model."""

    kind: str
    scorer: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("none", "no_joint", "no_ehr_init",
                             "no_unaligned"):
            raise ConfigError(f"unknown ablation toggle {self.kind!r}")
        if self.kind == "no_joint":
            if self.scorer not in SCORERS:
                raise ConfigError(f"no_joint toggle needs a scorer out of "
                                  f"{SCORERS}, got {self.scorer!r}")
        elif self.scorer is not None:
            raise ConfigError(f"toggle {self.kind!r} takes no scorer")

    def label(self, variant: str) -> str:
        if self.kind == "none":
            return VARIANT_LABELS[variant]
        if self.kind == "no_joint":
            return f"w/o joint learning ({SCORER_LABELS[self.scorer]})"
        if self.kind == "no_ehr_init":
            return "w/o EHR embedding"
        return "w/o unaligned triplets"


DEFAULT_TOGGLES = (Toggle("no_joint", "linear"),
                   Toggle("no_joint", "transe"),
                   Toggle("no_joint", "tucker"),
                   Toggle("no_ehr_init"),
                   Toggle("no_unaligned"))


@dataclass
class AblationSpec:
    """Grid description: the removal toggles (the full-model baseline row
    is always included on top of them), and the repetition seeds."""

    config: RunConfig
    toggles: tuple[Toggle, ...] = DEFAULT_TOGGLES
    repetitions: int = 3
    seeds: Optional[tuple[int, ...]] = None

    def grid(self) -> tuple[Toggle, ...]:
        return (Toggle("none"),) + tuple(self.toggles)

    def resolved_seeds(self) -> tuple[int, ...]:
        if self.seeds is not None:
            if len(self.seeds) != self.repetitions:
                raise ConfigError(f"{len(self.seeds)} seeds given for "
                                  f"{self.repetitions} repetitions")
            return tuple(self.seeds)
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        return tuple(self.config.seed + r for r in range(self.repetitions))


@dataclass
class AblationCell:
    modality: str
    label: str
    reports: list[EvalReport] = field(default_factory=list)
    error: Optional[str] = None
    skipped: int = 0

    @property
    def failed(self) -> bool:
        return self.error is not None

    def mean_metrics(self) -> dict[str, dict[str, float]]:
        """Per-label metric means over the repetition reports."""
        if self.failed or not self.reports:
            return {}
        out: dict[str, dict[str, float]] = {}
        labels = ["micro"] + list(self.reports[0].per_type)
        for name in labels:
            rows = [(r.micro if name == "micro" else r.per_type[name])
                    for r in self.reports]
            out[name] = {
                "accuracy": float(np.mean([m.accuracy for m in rows])),
                "precision": float(np.mean([m.precision for m in rows])),
                "recall": float(np.mean([m.recall for m in rows])),
                "f1": float(np.mean([m.f1 for m in rows])),
            }
        return out


@dataclass
class AblationTable:
    cells: list[AblationCell]
    seeds: tuple[int, ...]
    type_names: tuple[str, ...]

    def cell(self, modality: str, label: str) -> AblationCell:
        for c in self.cells:
            if c.modality == modality and c.label == label:
                return c
        raise KeyError((modality, label))

    def format_table(self) -> str:
        """Fixed-width table: accuracy block then F1 block, micro first,
        values scaled to percentages."""
        labels = ["micro"] + list(self.type_names)
        header = (f"{'Modality':<10}{'Model':<30}"
                  + "".join(f"acc {n:<6}" for n in labels)
                  + "".join(f"f1 {n:<7}" for n in labels))
        lines = [header]
        for c in self.cells:
            row = f"{c.modality:<10}{c.label:<30}"
            if c.failed:
                row += f"FAILED: {c.error}"
            else:
                means = self.mean_of(c)
                row += "".join(f"{100 * means[n]['accuracy']:<10.1f}"
                               for n in labels)
                row += "".join(f"{100 * means[n]['f1']:<10.1f}"
                               for n in labels)
            lines.append(row.rstrip())
        return "\n".join(lines)

    @staticmethod
    def mean_of(cell: AblationCell) -> dict[str, dict[str, float]]:
        return cell.mean_metrics()

    def as_records(self) -> list[dict]:
        records = []
        for c in self.cells:
            rec = {"modality": c.modality, "model": c.label,
                   "failed": c.failed, "skipped_pairs": c.skipped}
            if c.failed:
                rec["error"] = c.error
            else:
                rec["metrics"] = c.mean_metrics()
            records.append(rec)
        return records


def _cell_config(base: RunConfig, toggle: Toggle, seed: int) -> RunConfig:
    cfg = config_from_dict(base.as_dict())
    cfg.seed = seed
    if toggle.kind == "no_joint":
        cfg.train.no_joint = True
        cfg.train.scoring = toggle.scorer
    elif toggle.kind == "no_ehr_init":
        cfg.train.no_ehr_init = True
    elif toggle.kind == "no_unaligned":
        cfg.train.no_unaligned = True
    return cfg.validate()


def run_cell(cell_data: TrainData, config: RunConfig, valid_bags, test_bags
             ) -> tuple[EvalReport, EvalReport, int]:
    """Train one configuration and report (text, graph, skipped) on the
    test bags, with thresholds fitted per modality on the validation
    bags."""
    text_model = pretrain_text(cell_data, config)
    graph_model = pretrain_graph(cell_data, config)
    if not config.train.no_joint:
        model = cotrain(cell_data, text_model, graph_model, config)
        text_model, graph_model = model.text, model.graph

    names = cell_data.vocab.scored_types

    def text_report_scores(bags):
        probs = score_bags_eval(text_model, bags)
        return scores_by_type([(probs[i], b.label)
                               for i, b in enumerate(bags)], names)

    def graph_report_scores(bags):
        usable = [b for b in bags
                  if graph_model.kg.has_node(b.subject)
                  and graph_model.kg.has_node(b.object)]
        probs = score_pairs_eval(graph_model, [b.pair for b in usable],
                                 batch_size=config.graph.eval_batch_size)
        scores = scores_by_type([(probs[i], b.label)
                                 for i, b in enumerate(usable)], names)
        return scores, len(bags) - len(usable)

    text_thresholds = ThresholdSet.fit(text_report_scores(valid_bags))
    text_report = compute_report(text_report_scores(test_bags),
                                 text_thresholds)
    valid_graph, _ = graph_report_scores(valid_bags)
    graph_thresholds = ThresholdSet.fit(valid_graph)
    test_graph, skipped = graph_report_scores(test_bags)
    graph_report = compute_report(test_graph, graph_thresholds)
    return text_report, graph_report, skipped


def run_ablation(spec: AblationSpec, data: TrainData) -> AblationTable:
    """Train every (toggle, seed) combination once and aggregate into a
    two-modality comparison table."""
    config = spec.config.validate()
    seeds = spec.resolved_seeds()
    cell_data, valid_bags, test_bags = holdout_split(data, config)
    variant = config.train.variant

    grid = spec.grid()
    cells = {}
    for toggle in grid:
        label = toggle.label(variant)
        cells[("Text", label)] = AblationCell("Text", label)
        cells[("Graph", label)] = AblationCell("Graph", label)
        for seed in seeds:
            try:
                cfg = _cell_config(config, toggle, seed)
                text_report, graph_report, skipped = run_cell(
                    cell_data, cfg, valid_bags, test_bags)
            except RemexError as exc:
                msg = f"seed {seed}: {exc}"
                cells[("Text", label)].error = msg
                cells[("Graph", label)].error = msg
                break
            cells[("Text", label)].reports.append(text_report)
            cells[("Graph", label)].reports.append(graph_report)
            cells[("Graph", label)].skipped = skipped

    ordered = []
    for modality in ("Text", "Graph"):
        for toggle in grid:
            ordered.append(cells[(modality, toggle.label(variant))])
    return AblationTable(ordered, seeds, tuple(data.vocab.scored_types))
