"""Low-rank adapters on attention projections.

For a frozen weight ``W`` (stored ``d_in x d_out``, used as ``x @ W``) an
adapter adds ``(alpha / r) * B(A x)`` with ``A: r x d`` and ``B: d x r``, which
is ``x @ (alpha / r) (BA)^T`` in row-vector form. ``B`` starts at zero, so a
freshly attached adapter leaves every output unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_container, save_container

log = logging.getLogger(__name__)

MATRIX_KEYS = {"query": "wq", "key": "wk", "value": "wv", "output": "wo"}
ALL_BLOCKS = ("encoder_self", "decoder_self", "decoder_cross")
_BLOCK_PATTERNS = {
    "encoder_self": ("enc", "self_attn"),
    "decoder_self": ("dec", "self_attn"),
    "decoder_cross": ("dec", "cross_attn"),
}


class LoraError(ValueError):
    pass


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    targets: list = field(default_factory=lambda: ["query", "value"])
    blocks: list = field(default_factory=lambda: list(ALL_BLOCKS))

    def __post_init__(self):
        if self.rank < 1:
            raise LoraError("LoRA rank must be >= 1")
        if self.alpha <= 0:
            raise LoraError("LoRA alpha must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise LoraError("LoRA dropout must lie in [0, 1)")
        unknown = set(self.targets) - set(MATRIX_KEYS)
        if unknown:
            raise LoraError(f"unknown LoRA target matrices: {sorted(unknown)}")
        unknown = set(self.blocks) - set(ALL_BLOCKS)
        if unknown:
            raise LoraError(f"unknown LoRA attention blocks: {sorted(unknown)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraAdapter:
    def __init__(self, config: LoraConfig, d_model: int, pairs: dict):
        self.config = config
        self.d_model = d_model
        self.pairs = pairs  # base weight name -> (A, B)
        self.dropout_rng = np.random.default_rng(0)

    @property
    def scale(self) -> float:
        return self.config.scale

    def branch(self, x, name, training=False):
        a, b = self.pairs[name]
        if training and self.config.dropout > 0:
            x = ad.dropout(x, self.config.dropout, self.dropout_rng)
        return ((x @ a.T) @ b.T) * self.scale

    def trainable_parameters(self):
        return [t for pair in self.pairs.values() for t in pair if t.requires_grad]

    def tensors(self) -> dict:
        out = {}
        for name, (a, b) in self.pairs.items():
            out[f"lora.{name}.A"] = a.data
            out[f"lora.{name}.B"] = b.data
        return out

    def copy(self, trainable: bool = True) -> "LoraAdapter":
        pairs = {
            n: (ad.Tensor(a.data.copy(), requires_grad=trainable), ad.Tensor(b.data.copy(), requires_grad=trainable))
            for n, (a, b) in self.pairs.items()
        }
        return LoraAdapter(self.config, self.d_model, pairs)

    def freeze(self):
        for t in self.trainable_parameters():
            t.requires_grad = False


def target_names(model, cfg: LoraConfig) -> list:
    names = []
    mc = model.config
    for block in cfg.blocks:
        stack, attn = _BLOCK_PATTERNS[block]
        layers = mc.n_enc_layers if stack == "enc" else mc.n_dec_layers
        for i in range(layers):
            for t in cfg.targets:
                names.append(f"{stack}.{i}.{attn}.{MATRIX_KEYS[t]}")
    order = list(model.params)
    return sorted(names, key=lambda n: order.index(n) if n in order else -1)


def attach(model, cfg: LoraConfig, seed: int = 0) -> LoraAdapter:
    """Wrap the configured q/v matrices, freeze the base and return the adapter."""
    d = model.config.d_model
    if cfg.rank >= d:
        raise LoraError(f"LoRA rank {cfg.rank} must be < d_model={d}")
    names = target_names(model, cfg)
    if not names:
        raise LoraError("LoRA config selects no target matrices")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    pairs = {}
    for name in names:
        w = model.params.get(name)
        if w is None:
            raise LoraError(f"model has no target matrix {name!r}")
        if w.shape != (d, d):
            raise LoraError(f"target matrix {name!r} has shape {w.shape}, expected ({d}, {d})")
        a = ad.parameter(rng.uniform(-bound, bound, size=(cfg.rank, d)), name=f"{name}.A")
        b = ad.parameter(np.zeros((d, cfg.rank)), name=f"{name}.B")
        pairs[name] = (a, b)
    model.freeze()
    adapter = LoraAdapter(cfg, d, pairs)
    model.adapter = adapter
    return adapter


def merge(model, adapter: LoraAdapter | None = None):
    """Adapter-free copy of ``model`` with ``W + (alpha/r)(BA)^T`` folded in."""
    adapter = adapter if adapter is not None else model.adapter
    merged = model.clone()
    merged.adapter = None
    if adapter is None:
        return merged
    for name, (a, b) in adapter.pairs.items():
        delta = adapter.scale * (b.data @ a.data)
        merged.params[name].data = model.params[name].data + delta.T
    return merged


def save_adapter(path, adapter: LoraAdapter, base_hash: str | None = None, kind: str = "lora",
                 extra: dict | None = None, meta: dict | None = None) -> None:
    config = {"lora": asdict(adapter.config), "d_model": adapter.d_model}
    m = dict(meta or {})
    if base_hash is not None:
        m["base_hash"] = base_hash
    tensors = adapter.tensors()
    if extra:
        tensors.update(extra)
    save_container(path, kind, config, tensors, m)


def load_adapter(path, model=None, attach_to_model: bool = True, return_container: bool = False):
    c = load_container(path)
    if c.kind not in ("lora", "ppo-policy"):
        raise LoraError(f"{path}: checkpoint kind {c.kind!r} is not an adapter")
    cfg = LoraConfig(**c.config["lora"])
    d = int(c.config["d_model"])
    if model is not None:
        if model.config.d_model != d:
            raise LoraError(f"adapter d_model={d} does not match model d_model={model.config.d_model}")
        expected = c.meta.get("base_hash")
        if expected and expected != model.param_hash():
            log.warning("adapter %s was trained on a different base model", path)
    pairs = {}
    for key, arr in c.tensors.items():
        if not key.startswith("lora."):
            continue
        base, which = key[len("lora."):].rsplit(".", 1)
        a, b = pairs.get(base, (None, None))
        t = ad.parameter(arr.copy(), name=key)
        pairs[base] = (t, b) if which == "A" else (a, t)
    for base, (a, b) in pairs.items():
        if a is None or b is None:
            raise LoraError(f"{path}: adapter for {base!r} is missing A or B")
        if model is not None and base not in model.params:
            raise LoraError(f"{path}: model has no target matrix {base!r}")
    adapter = LoraAdapter(cfg, d, pairs)
    if model is not None and attach_to_model:
        model.freeze()
        model.adapter = adapter
    return (adapter, c) if return_container else adapter
