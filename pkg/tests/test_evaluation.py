import csv
import io
import json

import pytest

from dtnmt.errors import ContractError, MissingArtifact, UndefinedDelta
from dtnmt.evaluation import (CLEAN, ModelKind, corpus_metric, delta_metric, evaluate_matrix, read_decodes,
                              score_decodes)
from dtnmt.model import save_checkpoint
from dtnmt.text import ParallelCorpus


def test_model_kinds():
    assert [k.value for k in ModelKind] == ["baseline", "finetune", "simple_replacement", "dual_nll",
                                            "dual_bleu", "dual_metric2"]
    assert ModelKind.BASELINE not in ModelKind.augmented()
    assert ModelKind.DUAL_NLL.is_dual and not ModelKind.FINETUNE.is_dual


def test_delta_examples():
    assert delta_metric(0.4, 0.4) == 0.0
    assert delta_metric(10, 20) == 0.5
    assert delta_metric(-0.1, 0.2) == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(UndefinedDelta):
        delta_metric(0.3, 0.0)


def test_corpus_metric_contract():
    assert corpus_metric(["a b c d"], ["a b c d"], "bleu") == 1.0
    with pytest.raises(ContractError):
        corpus_metric(["a"], ["a", "b"])
    with pytest.raises(ContractError):
        corpus_metric([], [])
    with pytest.raises(ContractError):
        corpus_metric(["a"], ["a"], "ter")


def _hyps():
    refs = ["a b c d", "e f g h"]
    hyps = {
        "baseline": {CLEAN: ["a b c d", "e f g h"], "rd10": ["a b d", "e f g h"], "rp10": ["a x c d", "e f y h"]},
        "finetune": {CLEAN: ["a b c d", "e f g x"], "rd10": ["a b c d", "e f g"], "rp10": ["a b c d", "e f y h"]},
    }
    return hyps, refs


def test_report_cells_and_deltas():
    hyps, refs = _hyps()
    r = score_decodes(hyps, refs, ["bleu", "chrf"], models=["baseline", "finetune", "dual_nll"],
                      testsets=["rd10", "rp10", CLEAN], seed=4)
    assert r.testsets[0] == CLEAN
    assert r.absent == ["dual_nll"]
    for m, t, k, s, d in r.rows():
        assert 0 <= s <= 1
        assert d == pytest.approx(1 - s / r.score(m, CLEAN, k), abs=1e-15)
        if t == CLEAN:
            assert d == 0.0
    assert r.score("baseline", CLEAN, "bleu") == 1.0


def test_report_renderings(tmp_path):
    hyps, refs = _hyps()
    r = score_decodes(hyps, refs, ["bleu"], models=["baseline", "dual_nll"], testsets=[CLEAN, "rp10"])
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["model", "testset", "metric", "score", "delta"]
    assert len(rows) == 1 + 2
    table = r.to_table("bleu")
    assert "RP10" in table and "absent" in table
    files = r.write(tmp_path)
    assert sorted(p.name for p in files) == ["report.csv", "report.json", "report.txt"]
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["absent"] == ["dual_nll"] and len(data["cells"]) == 2


def test_report_undefined_delta_is_nan():
    r = score_decodes({"m": {CLEAN: [""], "rd10": ["a"]}}, ["a b"], ["bleu"])  # empty output scores 0
    assert r.delta("m", "rd10", "bleu") is None
    assert r.to_csv().strip().endswith("nan")


def test_clean_required():
    with pytest.raises(ContractError):
        score_decodes({"m": {"rd10": ["a"]}}, ["a"], ["bleu"])


def test_evaluate_matrix(tiny_dual, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, tiny_dual, {})
    clean = ParallelCorpus([[4, 5], [6]], [[4], [5, 6]])
    sets = {CLEAN: clean, "rd10": clean.with_src([[4], [6]])}
    r = evaluate_matrix({"baseline": tiny_dual, "finetune": ckpt, "dual_nll": tmp_path / "none.ckpt",
                         "dual_bleu": None}, sets, ["bleu"], cache_dir=tmp_path / "dec")
    assert r.absent == ["dual_nll", "dual_bleu"]
    assert r.fingerprint["decode"] == "greedy"
    # the in-memory model and its checkpoint decode identically
    assert r.score("baseline", "rd10", "bleu") == r.score("finetune", "rd10", "bleu")
    hyps, refs = read_decodes(tmp_path / "dec", ["baseline", "finetune", "dual_nll"], [CLEAN, "rd10"])
    assert set(hyps) == {"baseline", "finetune"}
    again = score_decodes(hyps, refs, ["bleu"], models=r.models, testsets=r.testsets,
                          fingerprint=r.fingerprint)
    assert again.to_csv() == r.to_csv()


def test_evaluate_matrix_requires_shared_refs(tiny_dual):
    clean = ParallelCorpus([[4]], [[4]])
    with pytest.raises(ContractError):
        evaluate_matrix({"m": tiny_dual}, {CLEAN: clean, "rd10": ParallelCorpus([[4]], [[5]])})


def test_read_decodes_missing(tmp_path):
    with pytest.raises(MissingArtifact):
        read_decodes(tmp_path, ["baseline"], [CLEAN])
