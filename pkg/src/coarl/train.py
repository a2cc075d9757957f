"""Supervised phases: multi-task instruction tuning and adapter fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .checkpoint import load_container, save_container, save_model
from .data import PromptSample
from .lora import save_adapter
from .tokenizer import EOS, tokenize

log = logging.getLogger(__name__)

IGNORE_ID = -100
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 3
    max_input_tokens: int = 256
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    checkpoint_dir: str | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def phase1_defaults(**kw) -> TrainConfig:
    return TrainConfig(**{"learning_rate": 1e-4, "batch_size": 8, "epochs": 3, **kw})


def phase2_defaults(**kw) -> TrainConfig:
    return TrainConfig(**{"learning_rate": 4e-6, "batch_size": 8, "epochs": 16, **kw})


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def tensors(self) -> dict:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, step: int) -> "AdamState":
        st = cls(step=step)
        for k, a in tensors.items():
            if k.startswith("adam.m."):
                st.m[k[len("adam.m."):]] = a.copy()
            elif k.startswith("adam.v."):
                st.v[k[len("adam.v."):]] = a.copy()
        return st


def global_grad_norm(params) -> float:
    total = 0.0
    for _, p in params:
        if p.requires_grad and p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def adam_step(params, state: AdamState, lr: float, clip_norm: float | None = None) -> float:
    """One bias-corrected Adam update over ``(name, Tensor)`` pairs.

    Frozen tensors are skipped and get no moment state. With ``clip_norm`` the
    gradients are first rescaled so their global L2 norm is at most
    ``clip_norm``. Returns the pre-clip global norm.
    """
    live = [(n, p) for n, p in params if p.requires_grad]
    for n, p in live:
        if p.grad is not None and p.grad.shape != p.data.shape:
            raise ValueError(f"gradient for {n} has shape {p.grad.shape}, parameter has {p.data.shape}")
    norm = global_grad_norm(live)
    coef = 1.0
    if clip_norm is not None and norm > clip_norm:
        coef = clip_norm / norm
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, p in live:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if coef != 1.0:
            g = g * coef
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


# --------------------------------------------------------------------------
# batching


def encode_sample(sample: PromptSample, max_input: int, max_target: int):
    src = tokenize(sample.source, max_input).ids or [EOS]
    tgt = tokenize(sample.target, max_target - 1).ids + [EOS]
    return src, tgt


def batch_loss(model, encoded, tasks=None):
    """Mean token cross-entropy of a batch plus detached per-task means."""
    srcs = [e[0] for e in encoded]
    tgts = [e[1] for e in encoded]
    logits, ids, mask = model.forward_batch(srcs, tgts)
    targets = np.where(mask, ids, IGNORE_ID)
    loss = ad.cross_entropy(logits, targets, IGNORE_ID)
    per_task = {}
    if tasks is not None:
        logp = kernels.log_softmax_fwd(logits.data)
        nll = -np.take_along_axis(logp, np.where(mask, ids, 0)[..., None], axis=-1)[..., 0] * mask
        sums, counts = {}, {}
        for i, task in enumerate(tasks):
            sums[task] = sums.get(task, 0.0) + float(nll[i].sum())
            counts[task] = counts.get(task, 0) + int(mask[i].sum())
        per_task = {t: sums[t] / counts[t] for t in sorted(sums)}
    return loss, per_task


def evaluate_loss(model, samples, batch_size=8, max_input=256) -> float:
    """Token-weighted mean NLL over ``samples`` with dropout off."""
    max_len = model.config.max_seq_len
    enc = [encode_sample(s, min(max_input, max_len), max_len) for s in samples]
    total, count = 0.0, 0
    was_training = model.training
    model.training = False
    try:
        with ad.no_grad():
            for i in range(0, len(enc), batch_size):
                chunk = enc[i : i + batch_size]
                loss, _ = batch_loss(model, chunk)
                n = sum(len(t) for _, t in chunk)
                total += loss.item() * n
                count += n
    finally:
        model.training = was_training
    return total / count


class MetricsWriter:
    FIELDS = ("step", "task", "loss", "lr", "grad_norm")

    def __init__(self, path, fields=None, append=False):
        self.fields = fields or self.FIELDS
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not (append and self.path.exists())
        self._fh = open(self.path, "a" if append else "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(self.fields)

    def row(self, **values):
        self._w.writerow([_fmt(values.get(f, "")) for f in self.fields])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --------------------------------------------------------------------------
# trainer


@dataclass
class TrainResult:
    losses: list
    task_losses: list
    grad_norms: list
    steps: int
    final_checkpoint: str | None = None
    best_checkpoint: str | None = None


class SFTTrainer:
    """Teacher-forced cross-entropy training over ``PromptSample``s.

    The batch schedule is a pure function of ``(seed, step)``: epoch ``e`` uses
    the permutation ``default_rng([seed, e])``. Together with the saved Adam
    state this makes a resumed run follow the uninterrupted trajectory.
    """

    def __init__(self, model, samples, cfg: TrainConfig, phase: str, params, metrics_path=None,
                 dev_samples=None, base_hash=None):
        if not samples:
            raise TrainingError(f"{phase}: no training samples")
        self.model = model
        self.samples = list(samples)
        self.cfg = cfg
        self.phase = phase
        self.params = params
        self.state = AdamState()
        self.dev_samples = dev_samples
        self.base_hash = base_hash
        max_len = model.config.max_seq_len
        self.encoded = [encode_sample(s, min(cfg.max_input_tokens, max_len), max_len) for s in self.samples]
        self.tasks = [s.task_id for s in self.samples]
        self.metrics = MetricsWriter(metrics_path) if metrics_path else None
        self.best_dev = math.inf
        self.best_path = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.samples) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    def batch_indices(self, step: int):
        epoch, k = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.samples))
        bs = self.cfg.batch_size
        return order[k * bs : (k + 1) * bs]

    def train_step(self, step: int):
        idx = self.batch_indices(step)
        model = self.model
        model.training = True
        model.dropout_rng = np.random.default_rng([self.cfg.seed, step, 1])
        if model.adapter is not None:
            model.adapter.dropout_rng = np.random.default_rng([self.cfg.seed, step, 2])
        ad.zero_grads(p for _, p in self.params)
        try:
            loss, per_task = batch_loss(model, [self.encoded[i] for i in idx], [self.tasks[i] for i in idx])
        finally:
            model.training = False
        value = loss.item()
        if not math.isfinite(value):
            ad.current_record().clear()
            raise TrainingError(
                f"{self.phase}: non-finite loss {value} at step {step} (tasks {sorted(set(self.tasks[i] for i in idx))})"
            )
        ad.backward(loss)
        norm = adam_step(self.params, self.state, self.cfg.learning_rate, self.cfg.grad_clip_norm)
        return value, per_task, norm

    def run(self, start_step: int = 0, stop_step: int | None = None) -> TrainResult:
        stop = self.total_steps if stop_step is None else min(stop_step, self.total_steps)
        losses, task_losses, norms = [], [], []
        final = None
        for step in range(start_step, stop):
            value, per_task, norm = self.train_step(step)
            losses.append(value)
            task_losses.append(per_task)
            norms.append(norm)
            if self.metrics:
                for task, tl in per_task.items():
                    self.metrics.row(step=step, task=task, loss=tl, lr=self.cfg.learning_rate, grad_norm=norm)
                self.metrics.row(step=step, task=self.phase, loss=value, lr=self.cfg.learning_rate, grad_norm=norm)
            log.debug("%s step %d loss %.6f grad_norm %.4f", self.phase, step, value, norm)
            if (step + 1) % self.steps_per_epoch == 0 or step + 1 == self.total_steps:
                final = self._end_epoch(step)
        if self.metrics:
            self.metrics.close()
        return TrainResult(losses, task_losses, norms, stop, final, self.best_path)

    # ---- checkpoints ---------------------------------------------------

    def _end_epoch(self, step):
        if self.base_hash is not None and self.model.param_hash() != self.base_hash:
            raise TrainingError(f"{self.phase}: frozen base parameters changed by step {step}")
        if not self.cfg.checkpoint_dir:
            return None
        epoch = step // self.steps_per_epoch
        root = Path(self.cfg.checkpoint_dir)
        name = "epoch_%03d.carl" % epoch
        path = root / self.phase / name
        self.save(path)
        final = root / self.phase / "final.carl"
        shutil.copyfile(path, final)
        if self.dev_samples:
            dev = evaluate_loss(self.model, self.dev_samples, self.cfg.batch_size, self.cfg.max_input_tokens)
            if dev < self.best_dev:
                self.best_dev = dev
                best = root / "best" / f"{self.phase}.carl"
                best.parent.mkdir(parents=True, exist_ok=True)
                if best.is_symlink() or best.exists():
                    best.unlink()
                try:
                    os.symlink(os.path.relpath(path, best.parent), best)
                except OSError:
                    shutil.copyfile(path, best)
                self.best_path = str(best)
        return str(final)

    def save(self, path):
        # checkpoint_dir is left out so identical runs in different directories match byte for byte
        train_cfg = {k: v for k, v in asdict(self.cfg).items() if k != "checkpoint_dir"}
        meta = {"step": self.state.step, "phase": self.phase, "train_config": train_cfg}
        if self.model.adapter is None:
            save_model(path, self.model, extra=self.state.tensors(), meta=meta)
        else:
            save_adapter(path, self.model.adapter, base_hash=self.base_hash, extra=self.state.tensors(), meta=meta)

    def load_state(self, path) -> int:
        """Restore trainable tensors and Adam moments; returns the next step."""
        c = load_container(path)
        if self.model.adapter is None:
            for n, p in self.model.params.items():
                p.data = c.tensors[n].copy()
        else:
            for base, (a, b) in self.model.adapter.pairs.items():
                a.data = c.tensors[f"lora.{base}.A"].copy()
                b.data = c.tensors[f"lora.{base}.B"].copy()
        self.state = AdamState.from_tensors(c.tensors, int(c.meta["step"]))
        return self.state.step


def model_named_params(model):
    return [(n, p) for n, p in model.params.items()]


def adapter_named_params(adapter):
    out = []
    for base, (a, b) in adapter.pairs.items():
        out.append((f"lora.{base}.A", a))
        out.append((f"lora.{base}.B", b))
    return out


def train_phase1(model, mixture, cfg: TrainConfig, metrics_path=None, dev_samples=None) -> TrainResult:
    """Full-parameter training on the multi-task explanation mixture."""
    if model.adapter is not None:
        raise TrainingError("phase1 expects a model without an adapter")
    model.unfreeze()
    trainer = SFTTrainer(model, mixture, cfg, "phase1", model_named_params(model), metrics_path, dev_samples)
    return trainer.run()


def train_phase2(model, samples, cfg: TrainConfig, metrics_path=None, dev_samples=None) -> TrainResult:
    """Adapter-only training on I8 counterspeech samples; the base stays bit-frozen."""
    if model.adapter is None:
        raise TrainingError("phase2 needs an attached LoRA adapter")
    unfrozen = [n for n, p in model.params.items() if p.requires_grad]
    if unfrozen:
        raise TrainingError(f"phase2 base must be frozen; trainable base tensors: {unfrozen[:3]}")
    trainer = SFTTrainer(
        model, samples, cfg, "phase2", adapter_named_params(model.adapter), metrics_path, dev_samples,
        base_hash=model.param_hash(),
    )
    return trainer.run()
