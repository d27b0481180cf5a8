"""Full-pair inference, clique reconstruction and table-level metrics.

Metrics per category and graph kind:

* tpr: percentage of ground-truth cliques with an identical predicted clique
* fpr: percentage of predicted cliques with no identical ground-truth clique
* perfect matching: percentage of tables whose three predicted adjacency
  matrices equal the ground truth exactly
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .graph import (
    KINDS,
    AdjacencyTriple,
    CliqueExplosion,
    CliqueSet,
    connected_components,
    maximal_cliques,
)

SCHEMA_ID = "tablegraph-eval/1"

_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 100}
_KIND = {
    "type": "object",
    "properties": {"tpr": _RATE, "fpr": _RATE},
    "required": ["tpr", "fpr"],
    "additionalProperties": False,
}
_BLOCK = {
    "type": "object",
    "properties": {
        "samples": {"type": "integer", "minimum": 0},
        "clique_explosions": {"type": "integer", "minimum": 0},
        "perfect_matching": _RATE,
        **{k: _KIND for k in KINDS},
    },
    "required": ["samples", "clique_explosions", "perfect_matching", *KINDS],
    "additionalProperties": False,
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "schema": {"const": SCHEMA_ID},
        "averaging": {"enum": ["macro", "micro"]},
        "matching": {"const": "exact"},
        "symmetrize": {"enum": ["or", "and", "mean"]},
        "categories": {
            "type": "object",
            "patternProperties": {"^[1-4]$": _BLOCK},
            "additionalProperties": False,
        },
        "overall": _BLOCK,
    },
    "required": ["schema", "averaging", "matching", "symmetrize", "categories", "overall"],
    "additionalProperties": False,
}


def decode_adjacency(logits, symmetrize: str = "or") -> np.ndarray:
    """(v, v, 2) pair logits -> symmetric reflexive 0/1 matrix."""
    lg = np.asarray(logits, dtype=np.float64)
    if lg.ndim != 3 or lg.shape[0] != lg.shape[1] or lg.shape[2] != 2:
        raise ValueError(f"decode_adjacency needs (v, v, 2) logits, got {lg.shape}")
    if symmetrize == "mean":
        avg = (lg + lg.transpose(1, 0, 2)) / 2
        out = np.argmax(avg, axis=-1).astype(np.uint8)
    else:
        raw = np.argmax(lg, axis=-1).astype(bool)
        if symmetrize == "or":
            out = (raw | raw.T).astype(np.uint8)
        elif symmetrize == "and":
            out = (raw & raw.T).astype(np.uint8)
        else:
            raise ValueError(f"unknown symmetrize mode {symmetrize!r}")
    np.fill_diagonal(out, 1)
    return out


def oracle_logits(adj, margin: float = 10.0) -> np.ndarray:
    """Pair logits that decode to ``adj`` exactly."""
    a = np.asarray(adj) != 0
    return np.stack([np.where(a, -margin, margin), np.where(a, margin, -margin)], axis=-1)


def _match_counts(gt: CliqueSet, pred: CliqueSet) -> tuple[int, int, int, int]:
    gt_sets = {frozenset(c) for c in gt.cliques}
    pred_sets = {frozenset(c) for c in pred.cliques}
    matched_gt = sum(1 for c in gt.cliques if frozenset(c) in pred_sets)
    unmatched_pred = sum(1 for c in pred.cliques if frozenset(c) not in gt_sets)
    return matched_gt, len(gt.cliques), unmatched_pred, len(pred.cliques)


def clique_tpr(gt: CliqueSet, pred: CliqueSet) -> float:
    matched, n_gt, _, _ = _match_counts(gt, pred)
    return 100.0 * matched / n_gt if n_gt else 100.0


def clique_fpr(gt: CliqueSet, pred: CliqueSet) -> float:
    _, _, unmatched, n_pred = _match_counts(gt, pred)
    return 100.0 * unmatched / n_pred if n_pred else 0.0


def perfect_match(gt: AdjacencyTriple, pred: AdjacencyTriple) -> bool:
    return gt == pred


def predict_triple(model, sample, symmetrize: str = "or") -> AdjacencyTriple:
    res = model.forward(sample, "infer")
    return AdjacencyTriple(*(decode_adjacency(res.logits[h].data, symmetrize) for h in KINDS))


def oracle_triple(sample, symmetrize: str = "or") -> AdjacencyTriple:
    return AdjacencyTriple(*(decode_adjacency(oracle_logits(sample.gt[h]), symmetrize) for h in KINDS))


def cliques_for(kind: str, adj, max_cliques=None) -> CliqueSet:
    if kind == "cells":
        return connected_components(adj)
    return maximal_cliques(adj, "row" if kind == "rows" else "column", max_cliques)


@dataclass
class SampleScore:
    category: int
    perfect: bool
    counts: dict  # kind -> (matched_gt, n_gt, unmatched_pred, n_pred)
    exploded: list


def score_sample(sample, pred: AdjacencyTriple, max_cliques=None) -> SampleScore:
    gt = sample.gt
    counts, exploded = {}, []
    for kind in KINDS:
        gt_cl = cliques_for(kind, gt[kind])  # ground truth uses the default guard
        try:
            pred_cl = cliques_for(kind, pred[kind], max_cliques)
        except CliqueExplosion:
            exploded.append(kind)
            # counted as nothing found and one unmatched prediction
            counts[kind] = (0, len(gt_cl), 1, 1)
            continue
        counts[kind] = _match_counts(gt_cl, pred_cl)
    return SampleScore(sample.category, perfect_match(gt, pred), counts, exploded)


def _aggregate(scores: list[SampleScore], averaging: str) -> dict:
    n = len(scores)
    block = {
        "samples": n,
        "clique_explosions": sum(len(s.exploded) for s in scores),
        "perfect_matching": 100.0 * sum(s.perfect for s in scores) / n if n else None,
    }
    for kind in KINDS:
        if not n:
            block[kind] = {"tpr": None, "fpr": None}
            continue
        if averaging == "macro":
            tprs, fprs = [], []
            for s in scores:
                m, ng, u, npred = s.counts[kind]
                tprs.append(100.0 * m / ng if ng else 100.0)
                fprs.append(100.0 * u / npred if npred else 0.0)
            block[kind] = {"tpr": float(np.mean(tprs)), "fpr": float(np.mean(fprs))}
        else:
            tot = np.array([s.counts[kind] for s in scores], dtype=np.int64).sum(axis=0)
            m, ng, u, npred = (int(x) for x in tot)
            block[kind] = {
                "tpr": 100.0 * m / ng if ng else 100.0,
                "fpr": 100.0 * u / npred if npred else 0.0,
            }
    return block


def build_report(scores: list[SampleScore], averaging: str = "macro", symmetrize: str = "or") -> dict:
    if averaging not in ("macro", "micro"):
        raise ValueError(f"averaging must be macro or micro, got {averaging!r}")
    by_cat = defaultdict(list)
    for s in scores:
        by_cat[s.category].append(s)
    return {
        "schema": SCHEMA_ID,
        "averaging": averaging,
        "matching": "exact",
        "symmetrize": symmetrize,
        "categories": {str(c): _aggregate(by_cat[c], averaging) for c in sorted(by_cat)},
        "overall": _aggregate(scores, averaging),
    }


def evaluate_samples(samples, model=None, oracle: bool = False, symmetrize: str = "or",
                     averaging: str = "macro", max_cliques=None) -> dict:
    """Score every sample (in order) and aggregate into a report dict."""
    if model is None and not oracle:
        raise ValueError("need a model or oracle=True")
    scores = []
    for sample in samples:
        pred = oracle_triple(sample, symmetrize) if oracle else predict_triple(model, sample, symmetrize)
        scores.append(score_sample(sample, pred, max_cliques))
    return build_report(scores, averaging, symmetrize)


def evaluate(checkpoint, data_dir, oracle: bool = False, **kw) -> dict:
    from .dataset import load_dataset
    from .model import load_model

    samples = [s for _, s in load_dataset(data_dir)]
    model = None if oracle else load_model(checkpoint)[0]
    return evaluate_samples(samples, model, oracle=oracle, **kw)


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _fmt(x, width=8):
    return f"{'-':>{width}}" if x is None else f"{x:{width}.2f}"


def format_tables(report: dict) -> str:
    """Plain-text TPR, FPR and perfect-matching tables, one line per category."""
    cats = sorted(report["categories"], key=int)
    rows = [(f"category {c}", report["categories"][c]) for c in cats] + [("overall", report["overall"])]
    lines = []
    for title, key in (("True positive rate (%)", "tpr"), ("False positive rate (%)", "fpr")):
        lines.append(title)
        lines.append(f"{'':<12}" + "".join(f"{k:>8}" for k in KINDS))
        for label, block in rows:
            lines.append(f"{label:<12}" + "".join(_fmt(block[k][key]) for k in KINDS))
        lines.append("")
    lines.append("Perfect matching (%)")
    lines.append(f"{'':<12}{'tables':>8}{'matched':>8}")
    for label, block in rows:
        lines.append(f"{label:<12}{block['samples']:>8d}{_fmt(block['perfect_matching'])}")
    return "\n".join(lines) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "kind", "tpr", "fpr", "perfect_matching", "samples"])
    for c in sorted(report["categories"], key=int):
        block = report["categories"][c]
        for k in KINDS:
            w.writerow([c, k, block[k]["tpr"], block[k]["fpr"], block["perfect_matching"], block["samples"]])
    return buf.getvalue()
