import os

import pytest
import torch

torch.set_num_threads(1)
os.environ.setdefault("OMP_NUM_THREADS", "1")

from dtnmt.model import ModelConfig, init_dual  # noqa: E402
from dtnmt.numeric import Rng  # noqa: E402
from dtnmt.pipeline import PipelineConfig, TrainConfig  # noqa: E402
from dtnmt.text import Vocab  # noqa: E402
from dtnmt.toydata import make_reversal_corpus  # noqa: E402


def small_vocab(n_content: int, prefix: str) -> Vocab:
    return Vocab([f"{prefix}{i}</w>" for i in range(n_content)])


@pytest.fixture
def tiny_dual():
    cfg = ModelConfig(d_model=8, num_layers=2, num_heads=2, ffn_dim=16, dropout=0.0, max_len=16)
    dual = init_dual(cfg, small_vocab(4, "s"), small_vocab(3, "t"), Rng(11))
    return dual.eval()


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toydata")
    make_reversal_corpus(d, seed=0, vocab_size=12, min_len=3, max_len=5,
                         sizes={"train": 240, "valid1": 48, "valid2": 32, "test": 40})
    return d


def tiny_config(toy_dir, out, **changes) -> PipelineConfig:
    from dtnmt.attack import AttackConfig

    cfg = PipelineConfig(
        train=str(toy_dir / "train"), valid1=str(toy_dir / "valid1"),
        valid2=str(toy_dir / "valid2"), test=str(toy_dir / "test"), out=str(out), seed=3,
        model=ModelConfig(d_model=16, num_layers=1, num_heads=2, ffn_dim=32, dropout=0.1, max_len=32),
        pretrain=TrainConfig(epochs=4, batch_size=16, lr=3e-3, warmup=20, label_smoothing=0.1),
        augment=TrainConfig(epochs=2, batch_size=16, lr=5e-4, warmup=0, label_smoothing=0.1),
        attack=AttackConfig(max_epochs=2, k=3, lr=1e-3, patience=3, batch_size=16),
        lambda_grid=[0.2, 0.8], p_np_grid=[0.7], p_rp_grid=[0.8, 0.9],
    )
    return cfg.replace(**changes)
