"""Corpus scoring, relative degradation, and the model x noisy-set report."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ContractError, MissingArtifact, UndefinedDelta
from .model import greedy_batch, load_checkpoint
from .objectives import CORPUS_METRICS

log = logging.getLogger(__name__)

CLEAN = "clean"


class ModelKind(str, Enum):
    BASELINE = "baseline"
    FINETUNE = "finetune"
    SIMPLE_REPLACEMENT = "simple_replacement"
    DUAL_NLL = "dual_nll"
    DUAL_BLEU = "dual_bleu"
    DUAL_METRIC2 = "dual_metric2"

    @classmethod
    def augmented(cls) -> list["ModelKind"]:
        return [k for k in cls if k is not cls.BASELINE]

    @property
    def is_dual(self) -> bool:
        return self.value.startswith("dual_")


def corpus_metric(hyps, refs, metric: str = "bleu") -> float:
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs) or not refs:
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    try:
        fn = CORPUS_METRICS[metric]
    except KeyError:
        raise ContractError(f"unknown metric {metric!r}") from None
    return fn(hyps, refs)


def delta_metric(score_noisy: float, score_clean: float) -> float:
    """1 - noisy/clean; may exceed 1 or go negative."""
    if score_clean == 0:
        raise UndefinedDelta("clean score is zero; delta is undefined")
    return 1.0 - score_noisy / score_clean


@dataclass
class EvalReport:
    """Raw scores per (model, testset, metric); deltas are derived on demand."""

    models: list[str]
    testsets: list[str]
    metrics: list[str]
    scores: dict[tuple[str, str, str], float] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)
    seed: int | None = None

    def score(self, model: str, testset: str, metric: str) -> float:
        return self.scores[(model, testset, metric)]

    def delta(self, model: str, testset: str, metric: str) -> float | None:
        try:
            return delta_metric(self.score(model, testset, metric), self.score(model, CLEAN, metric))
        except UndefinedDelta:
            return None

    def present(self) -> list[str]:
        return [m for m in self.models if m not in self.absent]

    def rows(self) -> list[tuple[str, str, str, float, float | None]]:
        out = []
        for m in self.present():
            for t in self.testsets:
                for k in self.metrics:
                    out.append((m, t, k, self.score(m, t, k), self.delta(m, t, k)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "testset", "metric", "score", "delta"])
        for m, t, k, s, d in self.rows():
            w.writerow([m, t, k, f"{s:.10f}", "nan" if d is None else f"{d:.10f}"])
        return buf.getvalue()

    def to_table(self, metric: str) -> str:
        """Rows are models; the clean column holds the score, the rest hold delta in percent."""
        header = ["model"] + [t if t == CLEAN else t.upper() for t in self.testsets]
        lines = [header]
        for m in self.models:
            if m in self.absent:
                lines.append([m] + ["absent"] + ["-"] * (len(self.testsets) - 1))
                continue
            row = [m]
            for t in self.testsets:
                if t == CLEAN:
                    row.append(f"{self.score(m, t, metric):.4f}")
                else:
                    d = self.delta(m, t, metric)
                    row.append("nan" if d is None else f"{100 * d:.1f}%")
            lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
        text = [f"[{metric}] clean score and delta per noisy set"]
        for r in lines:
            text.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(text) + "\n"

    def to_json(self) -> dict:
        return {
            "models": self.models, "testsets": self.testsets, "metrics": self.metrics,
            "absent": self.absent, "fingerprint": self.fingerprint, "seed": self.seed,
            "cells": [{"model": m, "testset": t, "metric": k, "score": s, "delta": d}
                      for m, t, k, s, d in self.rows()],
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            out / "report.csv": self.to_csv(),
            out / "report.txt": "".join(self.to_table(k) + "\n" for k in self.metrics),
            out / "report.json": json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n",
        }
        for path, text in files.items():
            path.write_text(text, encoding="utf-8")
        return list(files)


def score_decodes(hyps: Mapping[str, Mapping[str, Sequence[str]]], refs: Sequence[str],
                  metrics: Sequence[str], models: Sequence[str] | None = None,
                  testsets: Sequence[str] | None = None, fingerprint: dict | None = None,
                  seed: int | None = None) -> EvalReport:
    """Build a report from decoded text.  Models missing from ``hyps`` are marked absent."""
    models = list(models if models is not None else hyps)
    if testsets is None:
        present = next((hyps[m] for m in models if m in hyps), {})
        testsets = list(present)
    testsets = list(testsets)
    if CLEAN not in testsets:
        raise ContractError("the clean test set is required for deltas")
    testsets.remove(CLEAN)
    testsets.insert(0, CLEAN)
    report = EvalReport(models, testsets, list(metrics), fingerprint=dict(fingerprint or {}), seed=seed)
    for m in models:
        if m not in hyps:
            report.absent.append(m)
            continue
        for t in testsets:
            for k in metrics:
                report.scores[(m, t, k)] = corpus_metric(hyps[m][t], refs, k)
    return report


def decode_testsets(dual, testsets: Mapping[str, object]) -> dict[str, list[str]]:
    dual.eval()
    tv = dual.tgt_vocab
    return {name: [tv.decode(h) for h in greedy_batch(dual.forward, corpus.src)]
            for name, corpus in testsets.items()}


def evaluate_matrix(models: Mapping[str, object], testsets: Mapping[str, object],
                    metrics: Sequence[str] = ("bleu", "chrf"), cache_dir=None,
                    fingerprint: dict | None = None, seed: int | None = None) -> EvalReport:
    """Greedy-decode every (model, test set) pair and score it.

    ``models`` maps a kind label to a DualSystem, a checkpoint path, or None.
    Unloadable entries become absent rows.  All test sets must share
    references.  With ``cache_dir`` the decodes are written to
    ``<cache_dir>/<model>/<testset>.hyp`` for later re-scoring.
    """
    if not testsets or CLEAN not in testsets:
        raise ContractError("evaluate_matrix needs a 'clean' test set")
    ref_ids = testsets[CLEAN].tgt
    for name, corpus in testsets.items():
        if corpus.tgt != ref_ids:
            raise ContractError(f"test set {name!r} does not share the clean references")
    hyps, refs = {}, None
    for label, item in models.items():
        dual = item
        if item is None:
            log.warning("model %s: no checkpoint, row marked absent", label)
            continue
        if isinstance(item, (str, Path)):
            try:
                dual, _ = load_checkpoint(item)
            except MissingArtifact:
                log.warning("model %s: checkpoint %s missing, row marked absent", label, item)
                continue
        if refs is None:
            refs = [dual.tgt_vocab.decode(r) for r in ref_ids]
        hyps[label] = decode_testsets(dual, testsets)
        if cache_dir is not None:
            write_decodes(cache_dir, label, hyps[label])
    if cache_dir is not None and refs is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        (Path(cache_dir) / "refs.txt").write_text("".join(r + "\n" for r in refs), encoding="utf-8")
    fp = dict(fingerprint or {})
    fp.setdefault("decode", "greedy")
    return score_decodes(hyps, refs or [], metrics, list(models), list(testsets), fp, seed)


def write_decodes(cache_dir, label: str, decodes: Mapping[str, Sequence[str]]) -> list[Path]:
    d = Path(cache_dir) / label
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, lines in decodes.items():
        p = d / f"{name}.hyp"
        p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        paths.append(p)
    return paths


def read_decodes(cache_dir, models: Sequence[str], testsets: Sequence[str]):
    """Inverse of the cache written by evaluate_matrix: (hyps, refs)."""
    root = Path(cache_dir)
    refs_path = root / "refs.txt"
    if not refs_path.exists():
        raise MissingArtifact(f"no cached references under {root}")
    refs = refs_path.read_text(encoding="utf-8").splitlines()
    hyps = {}
    for m in models:
        if not (root / m).is_dir():
            continue
        hyps[m] = {}
        for t in testsets:
            p = root / m / f"{t}.hyp"
            if not p.exists():
                raise MissingArtifact(f"cached decode missing: {p}")
            hyps[m][t] = p.read_text(encoding="utf-8").splitlines()
    return hyps, refs
