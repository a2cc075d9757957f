"""Tiny pre-LN encoder-decoder transformer and its decoding routines.

Weights are stored in a flat name -> :class:`Tensor` map. Projections use the
row-vector convention ``y = x @ W`` with ``W`` of shape ``(d_in, d_out)``.
The output projection is tied to the token embedding.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import BOS, EOS, PAD

NEG_INF = -1e9
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 256
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.vocab_size <= EOS:
            raise ValueError(f"vocab_size must exceed {EOS} to hold the special ids")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class SamplingConfig:
    top_k: int = 1
    top_p: float = 1.0
    temperature: float = 1.0
    max_new_tokens: int = 64
    do_sample: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


def parameter_count(cfg: ModelConfig) -> int:
    """V*d + L_enc*(4d^2 + 2*d*f + f + 5d) + L_dec*(8d^2 + 2*d*f + f + 7d) + 4d."""
    d, f = cfg.d_model, cfg.d_ff
    enc = 4 * d * d + 2 * d * f + f + d + 4 * d
    dec = 8 * d * d + 2 * d * f + f + d + 6 * d
    return cfg.vocab_size * d + cfg.n_enc_layers * enc + cfg.n_dec_layers * dec + 4 * d


def _param_specs(cfg: ModelConfig):
    d, f = cfg.d_model, cfg.d_ff
    yield "embed", (cfg.vocab_size, d), "normal"

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            yield f"{prefix}.{w}", (d, d), "normal"

    def ln(prefix):
        yield f"{prefix}.gain", (d,), "ones"
        yield f"{prefix}.bias", (d,), "zeros"

    def ff(prefix):
        yield f"{prefix}.w1", (d, f), "normal"
        yield f"{prefix}.b1", (f,), "zeros"
        yield f"{prefix}.w2", (f, d), "normal"
        yield f"{prefix}.b2", (d,), "zeros"

    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        yield from ln(f"{p}.ln1")
        yield from attn(f"{p}.self_attn")
        yield from ln(f"{p}.ln2")
        yield from ff(f"{p}.ff")
    yield from ln("enc.ln_f")
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        yield from ln(f"{p}.ln1")
        yield from attn(f"{p}.self_attn")
        yield from ln(f"{p}.ln2")
        yield from attn(f"{p}.cross_attn")
        yield from ln(f"{p}.ln3")
        yield from ff(f"{p}.ff")
    yield from ln("dec.ln_f")


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def pad_batch(seqs, length=None, pad_id=PAD):
    """Right-pad id sequences; returns (ids[B, L], mask[B, L])."""
    longest = max((len(s) for s in seqs), default=0)
    length = longest if length is None else length
    if longest > length:
        raise ValueError(f"sequence of length {longest} exceeds pad length {length}")
    ids = np.full((len(seqs), max(length, 1)), pad_id, dtype=np.int64)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.adapter = None
        self.training = False
        self.dropout_rng = np.random.default_rng(0)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, shape, kind in _param_specs(config):
                if kind == "normal":
                    std = INIT_STD if name == "embed" else 1.0 / math.sqrt(shape[0])
                    data = rng.normal(0.0, std, size=shape)
                elif kind == "ones":
                    data = np.ones(shape)
                else:
                    data = np.zeros(shape)
                params[name] = ad.parameter(data, name=name)
        else:
            expected = {n: s for n, s, _ in _param_specs(config)}
            if set(params) != set(expected):
                missing = sorted(set(expected) - set(params))
                extra = sorted(set(params) - set(expected))
                raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
            for n, t in params.items():
                if t.shape != expected[n]:
                    raise ValueError(f"parameter {n} has shape {t.shape}, expected {expected[n]}")
            params = {n: params[n] for n in expected}
        self.params = params
        self._pe = sinusoidal_positions(config.max_seq_len + 1, config.d_model)

    # ------------------------------------------------------------------
    # parameter management

    def named_parameters(self):
        return list(self.params.items())

    def trainable_parameters(self):
        out = [p for p in self.params.values() if p.requires_grad]
        if self.adapter is not None:
            out += self.adapter.trainable_parameters()
        return out

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True

    def state_arrays(self):
        return {n: p.data for n, p in self.params.items()}

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def clone(self) -> "Seq2SeqModel":
        params = {n: ad.Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in self.params.items()}
        other = Seq2SeqModel(copy.deepcopy(self.config), params=params)
        other.adapter = self.adapter
        return other

    # ------------------------------------------------------------------
    # building blocks

    def _proj(self, x, name):
        out = x @ self.params[name]
        if self.adapter is not None and name in self.adapter.pairs:
            out = out + self.adapter.branch(x, name, self.training)
        return out

    def _drop(self, x):
        if self.training and self.config.dropout_rate > 0:
            return ad.dropout(x, self.config.dropout_rate, self.dropout_rng)
        return x

    def _ln(self, x, prefix):
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def _attention(self, prefix, xq, xkv, mask_add):
        cfg = self.config
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = cfg.n_heads
        dh = d // h
        q = self._proj(xq, f"{prefix}.wq").reshape(b, tq, h, dh).transpose(0, 2, 1, 3)
        k = (xkv @ self.params[f"{prefix}.wk"]).reshape(b, tk, h, dh).transpose(0, 2, 3, 1)
        v = self._proj(xkv, f"{prefix}.wv").reshape(b, tk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh)) + mask_add
        ctx = ad.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, tq, d)
        return ctx @ self.params[f"{prefix}.wo"]

    def _ff(self, x, prefix):
        p = self.params
        hidden = ad.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
        return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def _embed(self, ids):
        t = ids.shape[1]
        x = ad.embedding_lookup(self.params["embed"], ids) * math.sqrt(self.config.d_model)
        return x + self._pe[:t]

    def _check_ids(self, ids, what):
        cfg = self.config
        if ids.shape[1] > cfg.max_seq_len:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"{what} ids must lie in [0, {cfg.vocab_size})")

    # ------------------------------------------------------------------
    # encoder / decoder

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray) -> Tensor:
        self._check_ids(src_ids, "source")
        key_mask = np.where(src_mask, 0.0, NEG_INF)[:, None, None, :]
        x = self._drop(self._embed(src_ids))
        for i in range(self.config.n_enc_layers):
            p = f"enc.{i}"
            hx = self._ln(x, f"{p}.ln1")
            x = x + self._drop(self._attention(f"{p}.self_attn", hx, hx, key_mask))
            x = x + self._drop(self._ff(self._ln(x, f"{p}.ln2"), f"{p}.ff"))
        return self._ln(x, "enc.ln_f")

    def decode(self, memory: Tensor, src_mask: np.ndarray, dec_in: np.ndarray, dec_mask: np.ndarray) -> Tensor:
        """Logits ``[B, T, V]`` for decoder input ``dec_in`` (already BOS-shifted)."""
        t = dec_in.shape[1]
        if t > self.config.max_seq_len:
            raise ValueError(f"target length {t} exceeds max_seq_len={self.config.max_seq_len}")
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        self_mask = causal[None, None] + np.where(dec_mask, 0.0, NEG_INF)[:, None, None, :]
        cross_mask = np.where(src_mask, 0.0, NEG_INF)[:, None, None, :]
        x = self._drop(self._embed(dec_in))
        for i in range(self.config.n_dec_layers):
            p = f"dec.{i}"
            hx = self._ln(x, f"{p}.ln1")
            x = x + self._drop(self._attention(f"{p}.self_attn", hx, hx, self_mask))
            x = x + self._drop(self._attention(f"{p}.cross_attn", self._ln(x, f"{p}.ln2"), memory, cross_mask))
            x = x + self._drop(self._ff(self._ln(x, f"{p}.ln3"), f"{p}.ff"))
        x = self._ln(x, "dec.ln_f")
        return x @ self.params["embed"].T

    def forward_batch(self, srcs, tgts, src_len=None, tgt_len=None):
        """Teacher-forced logits for a padded batch.

        Position ``t`` of the output predicts ``tgts[b][t]`` from the source and
        ``tgts[b][:t]``. Returns ``(logits[B, T, V], target_ids[B, T], tgt_mask)``.
        """
        src_ids, src_mask = pad_batch(srcs, src_len)
        tgt_ids, tgt_mask = pad_batch(tgts, tgt_len)
        self._check_ids(tgt_ids, "target")
        dec_in = np.concatenate([np.full((len(tgts), 1), BOS, dtype=np.int64), tgt_ids[:, :-1]], axis=1)
        dec_mask = np.concatenate([np.ones((len(tgts), 1), dtype=bool), tgt_mask[:, :-1]], axis=1)
        memory = self.encode(src_ids, src_mask)
        return self.decode(memory, src_mask, dec_in, dec_mask), tgt_ids, tgt_mask


def forward(model: Seq2SeqModel, src_ids, tgt_ids) -> Tensor:
    """Logits ``[len(tgt), V]``; row ``t`` depends on ``src`` and ``tgt[:t]`` only."""
    if len(src_ids) == 0 or len(tgt_ids) == 0:
        raise ValueError("source and target must be non-empty")
    logits, _, _ = model.forward_batch([list(src_ids)], [list(tgt_ids)])
    return logits.reshape(len(tgt_ids), model.config.vocab_size)


def batch_token_logprobs(model, srcs, outs, src_len=None, out_len=None):
    """Per-token log-probs ``[B, T]`` of ``outs`` (Tensor) and the validity mask."""
    logits, tgt_ids, mask = model.forward_batch(srcs, outs, src_len, out_len)
    gathered = ad.gather_last(ad.log_softmax(logits, axis=-1), tgt_ids)
    return gathered, mask


def sequence_logprob(model, src_ids, out_ids) -> Tensor:
    """log pi(out_t | src, out_<t) for every position; the sum is log pi(out | src)."""
    if len(out_ids) == 0:
        raise ValueError("output sequence is empty")
    lp, _ = batch_token_logprobs(model, [list(src_ids)], [list(out_ids)])
    return lp.reshape(len(out_ids))


# --------------------------------------------------------------------------
# decoding


def filter_logits(logits: np.ndarray, sampling: SamplingConfig) -> np.ndarray:
    """Next-token distribution after temperature, top-k, then top-p (renormalised)."""
    z = logits / sampling.temperature
    order = np.argsort(-z, kind="stable")
    k = min(sampling.top_k, z.size)
    keep = order[:k]
    zk = z[keep]
    p = np.exp(zk - zk.max())
    p /= p.sum()
    if sampling.top_p < 1.0:
        cum = np.cumsum(p)
        n = int(np.searchsorted(cum, sampling.top_p) + 1)
        keep, p = keep[:n], p[:n]
        p = p / p.sum()
    probs = np.zeros_like(z)
    probs[keep] = p
    return probs


def _choose(logits: np.ndarray, sampling: SamplingConfig, rng) -> int:
    if not sampling.do_sample:
        return int(np.argmax(logits))
    probs = filter_logits(logits, sampling)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return int(order[min(idx, order.size - 1)])


def generate_batch(model: Seq2SeqModel, srcs, sampling: SamplingConfig, rng=None):
    """Decode each source; returns one id array per source, ending at EOS if emitted."""
    if any(len(s) == 0 for s in srcs):
        raise ValueError("generate needs a non-empty source")
    rng = np.random.default_rng(sampling.seed) if rng is None else rng
    max_new = min(sampling.max_new_tokens, model.config.max_seq_len)
    n = len(srcs)
    outs = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    with ad.no_grad():
        src_ids, src_mask = pad_batch(srcs)
        memory = model.encode(src_ids, src_mask)
        for _ in range(max_new):
            active = np.nonzero(~done)[0]
            if active.size == 0:
                break
            dec = [[BOS] + outs[i] for i in active]
            dec_in, dec_mask = pad_batch(dec)
            mem = memory if active.size == n else ad.Tensor(memory.data[active])
            logits = model.decode(mem, src_mask[active], dec_in, dec_mask).data
            for row, i in enumerate(active):
                last = len(outs[i])
                tok = _choose(logits[row, last], sampling, rng)
                outs[i].append(tok)
                if tok == EOS:
                    done[i] = True
    return [np.asarray(o, dtype=np.int64) for o in outs]


def generate(model: Seq2SeqModel, src_ids, sampling: SamplingConfig, rng=None) -> np.ndarray:
    return generate_batch(model, [list(src_ids)], sampling, rng)[0]
