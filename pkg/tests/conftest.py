import numpy as np
import pytest

from coarl.model import ModelConfig, Seq2SeqModel


def tiny_config(**kw):
    base = dict(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16, max_seq_len=16)
    base.update(kw)
    return ModelConfig(**base)


def perturbed_model(cfg=None, seed=0, scale=0.3):
    """A model whose ones/zeros-initialised tensors are jittered so every path carries gradient."""
    m = Seq2SeqModel(cfg or tiny_config(), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.params.values():
        p.data += rng.normal(0.0, scale, p.shape)
    return m


@pytest.fixture
def tiny_model():
    return perturbed_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


DESK_CONFIG = str(__import__("pathlib").Path(__file__).parents[1] / "configs" / "desk.json")


def run_pipeline(root, config=DESK_CONFIG):
    """Run phases 1-3 plus generate/evaluate through the CLI; return {relative path: bytes}."""
    from pathlib import Path

    from coarl.cli import main

    root = Path(root)
    steps = [
        ["phase1-train", "--config", config, "--out-dir", str(root / "p1")],
        ["phase2-train", "--config", config, "--out-dir", str(root / "p2"),
         "--checkpoint", str(root / "p1/checkpoints/phase1/final.carl")],
        ["phase3-ppo", "--config", config, "--out-dir", str(root / "p3"),
         "--checkpoint", str(root / "p1/checkpoints/phase1/final.carl"),
         "--adapter", str(root / "p2/checkpoints/phase2/final.carl")],
        ["generate", "--config", config, "--checkpoint", str(root / "p1/checkpoints/phase1/final.carl"),
         "--adapter", str(root / "p3/checkpoints/phase3/final.carl"), "--output", str(root / "gen.jsonl")],
        ["evaluate", "--config", config, "--generations", str(root / "gen.jsonl"),
         "--output-csv", str(root / "eval.csv")],
    ]
    for argv in steps:
        status = main(argv)
        if status != 0:
            raise RuntimeError(f"{argv[0]} exited with {status}")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
