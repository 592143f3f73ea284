"""Pipeline stages and the on-disk run layout.

Layout of an output directory::

    manifest.json               append-only stage records
    bpe.{src,tgt} vocab.{src,tgt}
    pretrain.ckpt pretrain.scores.json
    attack/<name>.trace.tsv attack/<name>.embed.npy
    models/<kind>.ckpt models/<kind>.log.tsv
    noisy/test.<rd|rp><pct>.src
    decodes/<kind>/<testset>.hyp decodes/refs.txt
    report.{csv,txt,json}
    sweep/<grid>/<point>/...   sweep/<grid>.{csv,txt}

Every stage is keyed by a fingerprint of what it depends on.  Re-running a
stage whose record and outputs are intact is a no-op.
"""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attack import AttackConfig, attack_embedding, track_degradation
from .errors import ContractError, MissingArtifact, NumericError
from .evaluation import (CLEAN, EvalReport, ModelKind, corpus_metric, evaluate_matrix,
                         read_decodes, score_decodes)
from .model import (DualSystem, ModelConfig, file_digest, greedy_batch, init_dual, load_checkpoint,
                    save_checkpoint)
from .numeric import AdamState, Rng, adam_step, backward
from .objectives import METRICS, nll_loss
from .perturb import (NOISE_RATIOS, NOISE_TYPES, EmbeddingPair, NoiseSpec, PerturbationPolicy,
                      adversarialize_many, make_noisy_testset, noisy_path)
from .text import (SPLITS, BpeModel, Codec, ParallelCorpus, apply_bpe, batch_iter, build_vocab,
                   learn_bpe, load_corpus, make_batch, read_lines, write_lines)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 200
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.warmup < 0:
            raise ContractError("lr must be positive and warmup non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError("label_smoothing must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Linear warmup then inverse square-root decay; constant when warmup == 0."""
        if self.warmup == 0:
            return self.lr
        return self.lr * min(step / self.warmup, math.sqrt(self.warmup / step))


def _default_augment() -> TrainConfig:
    return TrainConfig(epochs=10, batch_size=16, lr=5e-4, warmup=0, label_smoothing=0.1)


_NESTED = {"model": ModelConfig, "pretrain": TrainConfig, "augment": TrainConfig,
           "attack": AttackConfig, "policy": PerturbationPolicy}


@dataclass
class PipelineConfig:
    train: str = ""
    valid1: str = ""
    valid2: str = ""
    test: str = ""
    out: str = "run"
    seed: int = 0
    bpe_merges: int = 1000
    min_count: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    augment: TrainConfig = field(default_factory=_default_augment)
    attack: AttackConfig = field(default_factory=AttackConfig)
    policy: PerturbationPolicy = field(default_factory=PerturbationPolicy)
    metric: str = "bleu"
    metric2: str = "chrf"
    metrics: list[str] = field(default_factory=lambda: ["bleu", "chrf"])
    noise_types: list[str] = field(default_factory=lambda: list(NOISE_TYPES))
    noise_ratios: list[float] = field(default_factory=lambda: list(NOISE_RATIOS))
    sweep_mode: str = "dual_bleu"
    lambda_grid: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.8])
    p_np_grid: list[float] = field(default_factory=lambda: [0.6, 0.7, 0.8])
    p_rp_grid: list[float] = field(default_factory=lambda: [0.7, 0.8, 0.9])

    def __post_init__(self):
        for key in [self.metric, self.metric2, *self.metrics]:
            if key not in METRICS:
                raise ContractError(f"unknown metric {key!r}; choose from {sorted(METRICS)}")
        if self.sweep_mode not in [k.value for k in ModelKind.augmented()]:
            raise ContractError(f"sweep_mode must be an augmentation mode, got {self.sweep_mode!r}")
        self.noise_family()

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key, typ in _NESTED.items():
            if key in kw and isinstance(kw[key], dict):
                try:
                    kw[key] = typ(**kw[key])
                except TypeError as e:
                    raise ContractError(f"bad '{key}' section: {e}") from None
        if base_dir is not None:
            for split in SPLITS:
                if kw.get(split) and not os.path.isabs(kw[split]):
                    kw[split] = str(Path(base_dir) / kw[split])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(f"config not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    def corpus_files(self) -> dict[str, Path]:
        files = {}
        for split in SPLITS:
            prefix = getattr(self, split)
            if not prefix:
                raise ContractError(f"config has no path for the {split} split")
            for side in ("src", "tgt"):
                files[f"{split}.{side}"] = Path(f"{prefix}.{side}")
        return files

    def check_inputs(self) -> None:
        for name, p in self.corpus_files().items():
            if not p.exists():
                raise MissingArtifact(f"corpus file {name} not found at {p}")

    def noise_family(self) -> list[NoiseSpec]:
        return [NoiseSpec(k, r) for k in self.noise_types for r in self.noise_ratios]

    def attack_for(self, mode: str) -> AttackConfig:
        """Attack settings used by a dual augmentation mode."""
        if mode == ModelKind.DUAL_NLL.value:
            return dataclasses.replace(self.attack, objective="nll")
        if mode == ModelKind.DUAL_BLEU.value:
            return dataclasses.replace(self.attack, objective="mrt", metric="bleu")
        if mode == ModelKind.DUAL_METRIC2.value:
            return dataclasses.replace(self.attack, objective="mrt", metric=self.metric2)
        raise ContractError(f"{mode!r} is not a dual mode")


def toy_config(data_dir=None, seed: int = 0) -> PipelineConfig:
    """Settings for the synthetic reversal corpus written by ``toydata``.

    Corpus paths are bare split names when ``data_dir`` is None (resolved
    against the config file's directory on load).
    """
    def prefix(split):
        return split if data_dir is None else str(Path(data_dir) / split)

    cfg = PipelineConfig(**{s: prefix(s) for s in SPLITS}, seed=seed)
    # toy-scale attack: a larger step than the default so 15 epochs move E visibly
    cfg.attack = dataclasses.replace(cfg.attack, lr=3e-3, k=8)
    return cfg


def attack_name(cfg: AttackConfig) -> str:
    return "nll" if cfg.objective == "nll" else f"mrt-{cfg.metric}"


def fingerprint(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------- manifest


class RunManifest:
    """Append-only list of stage records stored as ``manifest.json``."""

    NAME = "manifest.json"

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.path = self.root / self.NAME
        self.records: list[dict] = []
        if self.path.exists():
            self.records = json.loads(self.path.read_text(encoding="utf-8"))["stages"]

    def _save(self) -> None:
        tmp = self.path.with_name(self.NAME + ".tmp")
        tmp.write_text(json.dumps({"stages": self.records}, indent=1) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    def intact(self, record: dict) -> bool:
        for rel, digest in record["outputs"].items():
            p = self.root / rel
            if not p.exists() or file_digest(p) != digest:
                return False
        return True

    def find(self, stage: str, fp: str) -> dict | None:
        for rec in reversed(self.records):
            if rec["stage"] == stage and rec["fingerprint"] == fp and self.intact(rec):
                return rec
        return None

    def claim(self, stage: str, fp: str, outputs: Sequence[str]) -> None:
        """Refuse to overwrite files another configuration produced."""
        wanted = set(outputs)
        for rec in self.records:
            if rec["stage"] == stage and rec["fingerprint"] == fp:
                continue
            clash = wanted & set(rec["outputs"])
            if clash and any(r.endswith(".ckpt") for r in clash):
                raise ContractError(
                    f"{self.root} already holds {sorted(clash)[0]} from stage {rec['stage']!r} "
                    f"with a different configuration; choose a fresh --out")

    def append(self, stage: str, fp: str, seed: int, inputs: dict, outputs: Sequence[Path],
               seconds: float, extra: dict | None = None) -> dict:
        rec = {
            "stage": stage, "fingerprint": fp, "seed": seed, "inputs": inputs,
            "outputs": {self.rel(p): file_digest(p) for p in outputs},
            "seconds": round(seconds, 3), "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if extra:
            rec.update(extra)
        self.records.append(rec)
        self._save()
        return rec

    def rel(self, p) -> str:
        return Path(p).resolve().relative_to(self.root.resolve()).as_posix()

    def files(self) -> set[str]:
        return {r for rec in self.records for r in rec["outputs"]}


@contextlib.contextmanager
def exclusive(out_dir):
    """Hold ``<out>/.lock`` for the duration; a second pipeline fails fast."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"{out} is locked by another pipeline ({lock}); remove it if stale") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Run:
    """A config bound to its output directory and manifest."""

    def __init__(self, cfg: PipelineConfig, force: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.out)
        self.force = force
        self.rng = Rng(cfg.seed)
        self._data: dict | None = None

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def stage(self, stage: str, fp: str, outputs: Sequence[Path], fn: Callable[[], dict | None],
              inputs: dict | None = None) -> dict:
        rec = None if self.force else self.manifest.find(stage, fp)
        if rec is not None:
            log.info("stage %s (%s): outputs intact, skipping", stage, fp)
            return rec
        self.manifest.claim(stage, fp, [self.manifest.rel(p) for p in outputs])
        for p in outputs:
            Path(p).parent.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        extra = fn() or {}
        missing = [str(p) for p in outputs if not Path(p).exists()]
        if missing:
            raise ContractError(f"stage {stage} did not write {missing}")
        rec = self.manifest.append(stage, fp, self.cfg.seed, inputs or {}, outputs, time.time() - t0, extra)
        log.info("stage %s done in %.1fs", stage, rec["seconds"])
        return rec

    # ---------------------------------------------------------------- fingerprints

    def fp_pretrain(self) -> str:
        c = self.cfg
        inputs = {k: file_digest(p) for k, p in c.corpus_files().items()}
        return fingerprint({"inputs": inputs, "bpe": c.bpe_merges, "min_count": c.min_count,
                            "model": asdict(c.model), "train": asdict(c.pretrain), "seed": c.seed})

    def fp_attack(self, acfg: AttackConfig) -> str:
        return fingerprint({"pretrain": self.fp_pretrain(), "attack": asdict(acfg), "seed": self.cfg.seed})

    def fp_augment(self, mode: str) -> str:
        c = self.cfg
        payload = {"pretrain": self.fp_pretrain(), "mode": mode, "train": asdict(c.augment),
                   "select": c.metric, "seed": c.seed}
        if mode != ModelKind.FINETUNE.value:
            payload["policy"] = asdict(c.policy)
        if ModelKind(mode).is_dual:
            payload["attack"] = self.fp_attack(c.attack_for(mode))
        return fingerprint(payload)

    def fp_noisegen(self) -> str:
        return fingerprint({"pretrain": self.fp_pretrain(), "family": [s.name for s in self.cfg.noise_family()],
                            "seed": self.cfg.seed})

    # ---------------------------------------------------------------- data

    def codecs(self) -> tuple[Codec, Codec]:
        for name in ("bpe.src", "bpe.tgt", "vocab.src", "vocab.tgt"):
            if not self.path(name).exists():
                raise MissingArtifact(f"{self.path(name)} missing; run pretrain first")
        from .text import Vocab

        return (Codec(BpeModel.load(self.path("bpe.src")), Vocab.load(self.path("vocab.src"))),
                Codec(BpeModel.load(self.path("bpe.tgt")), Vocab.load(self.path("vocab.tgt"))))

    def data(self) -> dict[str, ParallelCorpus]:
        if self._data is None:
            sc, tc = self.codecs()
            self._data = {s: load_corpus(getattr(self.cfg, s), sc, tc, s) for s in SPLITS}
        return self._data

    def pretrained(self) -> DualSystem:
        path = self.path("pretrain.ckpt")
        if not path.exists():
            raise MissingArtifact(f"{path} missing; run pretrain first")
        return load_checkpoint(path)[0]


# ---------------------------------------------------------------------- training


def flipped(corpus: ParallelCorpus) -> ParallelCorpus:
    return ParallelCorpus(corpus.tgt, corpus.src, corpus.split)


def corpus_score(model, corpus: ParallelCorpus, vocab, metric: str) -> float:
    model.eval()
    hyps = greedy_batch(model, corpus.src)
    return corpus_metric([vocab.decode(h) for h in hyps], [vocab.decode(r) for r in corpus.tgt], metric)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    score: float | None = None

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.6f}\t{'nan' if self.score is None else f'{self.score:.6f}'}"


def train_model(model, params: Sequence[torch.Tensor], corpus: ParallelCorpus, tc: TrainConfig, rng: Rng,
                transform: Callable[[int, list[int], list[list[int]]], list[list[int]]] | None = None,
                on_epoch: Callable[[int], float] | None = None, what: str = "training") -> list[EpochLog]:
    """NLL training with Adam and an inverse-sqrt schedule.

    ``transform(epoch, indices, sources)`` may rewrite each batch's sources
    (on-the-fly augmentation); ``on_epoch(epoch)`` returns a dev score.
    """
    torch.manual_seed(rng.substream("dropout").int_seed())
    state = AdamState(lr=tc.lr)
    history = []
    step = 0
    for epoch in range(1, tc.epochs + 1):
        model.train()
        total, n = 0.0, 0
        for batch in batch_iter(corpus, tc.batch_size, rng.substream("batch", epoch)):
            if transform is not None:
                src = transform(epoch, batch.indices, [corpus.src[i] for i in batch.indices])
                batch = make_batch(src, [corpus.tgt[i] for i in batch.indices], batch.indices)
            step += 1
            loss = nll_loss(model, batch, tc.label_smoothing)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericError(f"{what} diverged: loss {value} at epoch {epoch}, step {step}")
            grads = backward(loss, params)
            adam_step(params, grads, state, lr=tc.lr_at(step))
            total += value
            n += 1
        model.eval()
        score = on_epoch(epoch) if on_epoch is not None else None
        history.append(EpochLog(epoch, total / n, score))
        log.info("%s epoch %d: loss %.4f%s", what, epoch, total / n,
                 "" if score is None else f" dev {score:.4f}")
    model.eval()
    return history


def pretrain_dual(dual: DualSystem, train: ParallelCorpus, tc: TrainConfig, rng: Rng) -> tuple[list, list]:
    """Forward model from scratch, then the backward model with the shared matrix frozen."""
    dual.set_trainable([n for n, _ in dual.canonical_blocks()[0] if n.startswith("forward.")])
    fwd = train_model(dual.forward, dual.trainable(), train, tc, rng.substream("forward"), what="pretrain forward")
    frozen = dual.shared.detach().clone()
    dual.set_trainable([n for n, _ in dual.canonical_blocks()[0] if n.startswith("backward.")])
    bwd = train_model(dual.backward, dual.trainable(), flipped(train), tc, rng.substream("backward"),
                      what="pretrain backward")
    if not torch.equal(frozen, dual.shared.detach()):
        raise ContractError("shared embedding moved during backward pretraining")
    dual.set_trainable(None)
    return fwd, bwd


def finetune_forward(dual: DualSystem, train: ParallelCorpus, valid: ParallelCorpus, tc: TrainConfig,
                     rng: Rng, metric: str = "bleu", policy: PerturbationPolicy | None = None,
                     pair: EmbeddingPair | None = None) -> tuple[list[EpochLog], int]:
    """Fine-tune the forward model on ``train``; keep the epoch best on ``valid``.

    With ``policy`` and ``pair`` the sources are perturbed on the fly, each
    epoch drawing fresh decisions.  Returns the epoch logs and the best epoch;
    ``dual`` is left holding the best epoch's weights.
    """
    if (policy is None) != (pair is None):
        raise ContractError("policy and embedding pair go together")
    transform = None
    if policy is not None:
        def transform(epoch, idx, srcs):
            return adversarialize_many(srcs, idx, policy, pair, rng.substream("perturb", epoch))

    best = {"score": -math.inf, "epoch": 0, "state": None}

    def on_epoch(epoch):
        s = corpus_score(dual.forward, valid, dual.tgt_vocab, metric)
        if s > best["score"]:
            best.update(score=s, epoch=epoch, state=dual.state())
        return s

    dual.set_trainable([n for n, _ in dual.canonical_blocks()[0] if n.startswith("forward.")])
    history = train_model(dual.forward, dual.trainable(), train, tc, rng, transform, on_epoch, what="augment")
    dual.set_trainable(None)
    dual.load_state(best["state"])
    return history, best["epoch"]


# ------------------------------------------------------------------------ stages


def stage_pretrain(run: Run) -> dict:
    cfg = run.cfg
    cfg.check_inputs()
    files = cfg.corpus_files()
    ckpt = run.path("pretrain.ckpt")
    outputs = [run.path(n) for n in ("bpe.src", "bpe.tgt", "vocab.src", "vocab.tgt")] + \
        [ckpt, run.path("pretrain.scores.json")]

    def work():
        for side in ("src", "tgt"):
            lines = read_lines(files[f"train.{side}"])
            bpe = learn_bpe(lines, cfg.bpe_merges)
            bpe.save(run.path(f"bpe.{side}"))
            build_vocab([apply_bpe(line, bpe) for line in lines], cfg.min_count).save(run.path(f"vocab.{side}"))
        run._data = None
        data = run.data()
        sc, tc = run.codecs()
        rng = run.rng.substream("pretrain")
        dual = init_dual(cfg.model, sc.vocab, tc.vocab, rng)
        pretrain_dual(dual, data["train"], cfg.pretrain, rng)
        scores = {}
        for split in ("valid2", "test"):
            f, b = track_degradation(dual, data[split], cfg.metric)
            scores[split] = {"forward": f, "backward": b}
        run.path("pretrain.scores.json").write_text(
            json.dumps({"metric": cfg.metric, "seed": cfg.seed, "scores": scores}, indent=1, sort_keys=True) + "\n")
        save_checkpoint(ckpt, dual, {"stage": "pretrain", "seed": cfg.seed, "fingerprint": run.fp_pretrain(),
                                     "scores": scores})
        log.info("pretrained: %s", scores)
        return {"scores": scores}

    return run.stage("pretrain", run.fp_pretrain(), outputs, work,
                     {k: file_digest(p) for k, p in files.items()})


def attack_paths(run: Run, acfg: AttackConfig, prefix: Path | None = None) -> tuple[Path, Path]:
    base = (prefix or run.out) / "attack"
    name = attack_name(acfg)
    return base / f"{name}.trace.tsv", base / f"{name}.embed.npy"


def stage_attack(run: Run, acfg: AttackConfig, prefix: Path | None = None, label: str = "") -> np.ndarray:
    """Run the embedding attack; returns E'."""
    trace_path, embed_path = attack_paths(run, acfg, prefix)
    fp = run.fp_attack(acfg)

    def work():
        data = run.data()
        dual = run.pretrained()
        dual.set_attack_mode()
        before = dual.checksums(exclude_shared=True)
        res = attack_embedding(dual, data["valid1"], acfg, run.rng.substream("attack", attack_name(acfg)),
                               dev=data["test"])
        if dual.checksums(exclude_shared=True) != before:
            raise ContractError("attack modified parameters other than the shared embedding")
        write_lines(trace_path, res.trace_lines())
        np.save(embed_path, res.attacked.numpy())
        return {"converged": res.converged, "epochs": len(res.trace) - 1}

    run.stage(f"{label}attack:{attack_name(acfg)}", fp, [trace_path, embed_path], work)
    return np.load(embed_path)


def checkpoint_path(run: Run, mode: str, prefix: Path | None = None) -> Path:
    if mode == ModelKind.BASELINE.value:
        return run.path("pretrain.ckpt")
    return (prefix or run.out) / "models" / f"{mode}.ckpt"


def stage_augment(run: Run, mode: str, prefix: Path | None = None, label: str = "") -> Path:
    """Fine-tune the pretrained forward model under ``mode``; writes ``models/<mode>.ckpt``."""
    mode = ModelKind(mode).value
    if mode == ModelKind.BASELINE.value:
        raise ContractError("baseline is the pretrained model; nothing to augment")
    cfg = run.cfg
    ckpt = checkpoint_path(run, mode, prefix)
    log_path = ckpt.with_suffix(".log.tsv")
    fp = run.fp_augment(mode)

    def work():
        data = run.data()
        attacked = None
        if ModelKind(mode).is_dual:
            attacked = stage_attack(run, cfg.attack_for(mode), prefix, label)
        # a fresh copy of the pretrained weights: E' only feeds the neighbour search
        dual = run.pretrained()
        original = dual.shared.detach().clone()
        policy = pair = None
        if mode != ModelKind.FINETUNE.value:
            policy = cfg.policy
            pair = EmbeddingPair(original, attacked)
            if ModelKind(mode).is_dual and not pair.moved:
                log.warning("attack left E' == E; %s degenerates to simple_replacement", mode)
        history, best = finetune_forward(dual, data["valid1"], data["valid2"], cfg.augment,
                                         run.rng.substream("augment"), cfg.metric, policy, pair)
        write_lines(log_path, ["epoch\tloss\tvalid2_" + cfg.metric] + [h.line() for h in history])
        meta = {"stage": "augment", "mode": mode, "seed": cfg.seed, "fingerprint": fp, "best_epoch": best,
                "valid2": history[best - 1].score, "embedding_moved": bool(pair is not None and pair.moved)}
        save_checkpoint(ckpt, dual, meta)
        return {"best_epoch": best}

    run.stage(f"{label}augment:{mode}", fp, [ckpt, log_path], work)
    return ckpt


def noisy_files(run: Run) -> dict[str, Path]:
    base = run.path("noisy", "test")
    return {spec.name: noisy_path(base, spec, "src") for spec in run.cfg.noise_family()}


def stage_noisegen(run: Run) -> dict[str, Path]:
    files = noisy_files(run)

    def work():
        data = run.data()
        dual = run.pretrained()
        sv = dual.src_vocab
        rng = run.rng.substream("noisegen")
        for spec in run.cfg.noise_family():
            noisy = make_noisy_testset(data["test"], spec, dual.shared, sv, rng)
            write_lines(files[spec.name], [sv.decode(s) for s in noisy.src])

    run.stage("noisegen", run.fp_noisegen(), list(files.values()), work)
    return files


def testsets(run: Run) -> dict[str, ParallelCorpus]:
    data = run.data()
    sc, _ = run.codecs()
    test = data["test"]
    out = {CLEAN: test}
    for name, path in noisy_files(run).items():
        if not path.exists():
            raise MissingArtifact(f"{path} missing; run noisegen first")
        out[name] = test.with_src([sc.encode(line) for line in read_lines(path)], split=f"test.{name}")
    return out


def _eval_outputs(run: Run) -> list[Path]:
    return [run.path("report.csv"), run.path("report.txt"), run.path("report.json")]


def stage_evaluate(run: Run, kinds: Sequence[str] | None = None) -> EvalReport:
    kinds = [ModelKind(k).value for k in (kinds or [k.value for k in ModelKind])]
    sets = testsets(run)
    models = {}
    for k in kinds:
        p = checkpoint_path(run, k)
        models[k] = p if p.exists() else None
    fp_models = {k: (file_digest(p) if p is not None else None) for k, p in models.items()}
    fp = fingerprint({"models": fp_models, "noisegen": run.fp_noisegen(), "metrics": run.cfg.metrics})
    decodes = run.path("decodes")
    holder = {}

    def work():
        report = evaluate_matrix(models, sets, run.cfg.metrics, cache_dir=decodes,
                                 fingerprint=_report_fp(run, fp), seed=run.cfg.seed)
        report.write(run.out)
        holder["report"] = report

    outputs = _eval_outputs(run)
    present = [k for k in kinds if models[k] is not None]
    outputs += [decodes / k / f"{t}.hyp" for k in present for t in sets]
    if present:
        outputs.append(decodes / "refs.txt")
    run.stage("evaluate", fp, outputs, work)
    return holder.get("report") or stage_report(run, kinds, write=False)


def _report_fp(run: Run, fp: str) -> dict:
    return {"stage_fingerprint": fp, "decode": "greedy", "metrics": list(run.cfg.metrics), "seed": run.cfg.seed}


def stage_report(run: Run, kinds: Sequence[str] | None = None, write: bool = True) -> EvalReport:
    """Rebuild the report from cached decodes without touching any model."""
    kinds = [ModelKind(k).value for k in (kinds or [k.value for k in ModelKind])]
    names = [CLEAN] + list(noisy_files(run))
    rec = next((r for r in reversed(run.manifest.records) if r["stage"] == "evaluate"), None)
    if rec is None:
        raise MissingArtifact("no evaluate stage in the manifest; run evaluate first")
    hyps, refs = read_decodes(run.path("decodes"), kinds, names)
    report = score_decodes(hyps, refs, run.cfg.metrics, kinds, names,
                           _report_fp(run, rec["fingerprint"]), run.cfg.seed)
    if write:
        fp = fingerprint({"evaluate": rec["fingerprint"], "kinds": kinds})
        run.stage("report", fp, _eval_outputs(run), lambda: {"files": len(report.write(run.out))})
    return report


# ------------------------------------------------------------------------ sweeps


def sweep_points(cfg: PipelineConfig, grid: str) -> list[tuple[str, PipelineConfig, tuple]]:
    if grid == "lambda":
        return [(f"lambda-{lam:g}", cfg.replace(attack=dataclasses.replace(cfg.attack, lam=lam)), (lam,))
                for lam in cfg.lambda_grid]
    if grid == "prob":
        out = []
        for p_np in cfg.p_np_grid:
            for p_rp in cfg.p_rp_grid:
                pol = PerturbationPolicy(p_np=p_np, p_rp=p_rp, p_rd=round(1.0 - p_rp, 12))
                out.append((f"np-{p_np:g}_rp-{p_rp:g}", cfg.replace(policy=pol), (p_np, p_rp)))
        return out
    raise ContractError(f"grid must be 'lambda' or 'prob', got {grid!r}")


def stage_sweep(run: Run, grid: str) -> list[tuple[tuple, float]]:
    """Augment once per grid point and score each model on the clean test set."""
    cfg = run.cfg
    mode = cfg.sweep_mode
    results = []
    for name, sub_cfg, key in sweep_points(cfg, grid):
        sub = Run(sub_cfg, force=run.force)
        sub.manifest = run.manifest
        sub.out = run.out
        prefix = run.path("sweep", grid, name)
        ckpt = stage_augment(sub, mode, prefix, label=f"sweep/{grid}/{name}/")
        dual, _ = load_checkpoint(ckpt)
        results.append((key, corpus_score(dual.forward, run.data()["test"], dual.tgt_vocab, cfg.metric)))
    csv_path, txt_path = run.path("sweep", f"{grid}.csv"), run.path("sweep", f"{grid}.txt")

    def work():
        cols = ["lambda"] if grid == "lambda" else ["p_np", "p_rp"]
        write_lines(csv_path, [",".join(cols + [f"clean_{cfg.metric}"])] +
                    [",".join([f"{v:g}" for v in key] + [f"{s:.10f}"]) for key, s in results])
        write_lines(txt_path, sweep_table(grid, results, cfg.metric, mode))

    fp = fingerprint({"grid": grid, "results": results, "mode": mode})
    run.stage(f"sweep:{grid}", fp, [csv_path, txt_path], work)
    return results


def sweep_table(grid: str, results, metric: str, mode: str) -> list[str]:
    title = f"{mode}: clean {metric} per grid point"
    if grid == "lambda":
        rows = [["lambda", metric]] + [[f"{k[0]:g}", f"{s:.4f}"] for k, s in results]
    else:
        nps = sorted({k[0] for k, _ in results})
        rps = sorted({k[1] for k, _ in results})
        cell = {k: s for k, s in results}
        rows = [["P_np \\ P_rp"] + [f"{r:g}" for r in rps]]
        rows += [[f"{n:g}"] + [f"{cell[(n, r)]:.4f}" for r in rps] for n in nps]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return [title] + ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]


# ---------------------------------------------------------------------- commands


def _with_lock(fn):
    def wrapped(cfg: PipelineConfig, *args, force: bool = False, **kw):
        with exclusive(cfg.out):
            return fn(Run(cfg, force=force), *args, **kw)
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@_with_lock
def cmd_pretrain(run: Run) -> dict:
    return stage_pretrain(run)


@_with_lock
def cmd_finetune(run: Run) -> Path:
    stage_pretrain(run)
    return stage_augment(run, ModelKind.FINETUNE.value)


@_with_lock
def cmd_attack(run: Run, objective: str | None = None) -> np.ndarray:
    stage_pretrain(run)
    acfg = run.cfg.attack
    acfg = dataclasses.replace(acfg, objective=objective or acfg.objective, metric=run.cfg.metric)
    return stage_attack(run, acfg)


@_with_lock
def cmd_augment(run: Run, mode: str) -> Path:
    stage_pretrain(run)
    return stage_augment(run, mode)


@_with_lock
def cmd_noisegen(run: Run) -> dict[str, Path]:
    stage_pretrain(run)
    return stage_noisegen(run)


@_with_lock
def cmd_evaluate(run: Run, kinds: Sequence[str] | None = None) -> EvalReport:
    stage_noisegen(run)
    return stage_evaluate(run, kinds)


@_with_lock
def cmd_report(run: Run, kinds: Sequence[str] | None = None) -> EvalReport:
    return stage_report(run, kinds)


@_with_lock
def cmd_sweep(run: Run, grid: str = "lambda") -> list:
    stage_pretrain(run)
    return stage_sweep(run, grid)


@_with_lock
def cmd_all(run: Run, kinds: Sequence[str] | None = None) -> EvalReport:
    """Pretrain, augment every requested kind, generate noise, evaluate."""
    kinds = [ModelKind(k).value for k in (kinds or [k.value for k in ModelKind])]
    stage_pretrain(run)
    for k in kinds:
        if k != ModelKind.BASELINE.value:
            stage_augment(run, k)
    stage_noisegen(run)
    return stage_evaluate(run, kinds)
