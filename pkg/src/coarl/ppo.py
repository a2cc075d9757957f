"""KL-shaped PPO-clip over LoRA adapter weights.

The policy is ``base + adapter``; the reference is the same frozen base with a
frozen copy of the starting (SFT) adapter. Per token the reward is
``-beta * (log pi_RL - log pi_SFT)`` with the sequence reward added on the last
token. There is no value head: advantages are the whitened reward-to-go.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import kernels
from .lora import save_adapter
from .model import SamplingConfig, batch_token_logprobs, generate_batch
from .reward import RewardBreakdown, RewardError
from .tokenizer import detokenize, tokenize
from .train import AdamState, MetricsWriter, adam_step, adapter_named_params

log = logging.getLogger(__name__)

METRIC_FIELDS = ("batch", "mean_reward", "pc_mean", "aq_mean", "tox_mean", "kl", "beta", "surrogate_loss")


class PPOError(RuntimeError):
    pass


@dataclass
class PPOConfig:
    learning_rate: float = 1.4e-6
    init_kl_coeff: float = 0.03
    adaptive_kl: bool = True
    adaptive_target: float = 5.0
    horizon: int = 10000
    cliprange: float = 0.25
    batch_size: int = 32
    mini_batch_size: int = 2
    total_steps: int = 15000
    ppo_epochs: int = 5
    seed: int = 0
    target_kl: float = 0.05
    early_stop: bool = False
    max_input_tokens: int = 256
    max_new_tokens: int = 64
    temperature: float = 1.0
    grad_clip_norm: float | None = 1.0
    checkpoint_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.cliprange < 1.0:
            raise ValueError("cliprange must lie in (0, 1)")
        if self.init_kl_coeff <= 0:
            raise ValueError("init_kl_coeff must be > 0")
        if self.mini_batch_size < 1 or self.batch_size % self.mini_batch_size:
            raise ValueError("mini_batch_size must divide batch_size")
        if self.adaptive_target <= 0:
            raise ValueError("adaptive_target must be > 0")


class Prompt(NamedTuple):
    """``text`` is fed to the policy; ``topic`` is what the stance scorer sees."""

    text: str
    topic: str


@dataclass
class RolloutBatch:
    prompts: list
    src_ids: list
    responses: list
    logprobs: np.ndarray  # [B, T] pi_RL at sampling time, zero on padding
    ref_logprobs: np.ndarray  # [B, T] pi_SFT
    mask: np.ndarray  # [B, T] bool
    rewards: np.ndarray  # [B] sequence reward
    breakdowns: list
    kl: np.ndarray  # [B, T] per-token log-ratio
    shaped: np.ndarray  # [B, T]
    returns: np.ndarray
    advantages: np.ndarray
    beta: float
    src_len: int = 0
    out_len: int = 0
    texts: list = field(default_factory=list)

    def __len__(self):
        return len(self.responses)


@contextlib.contextmanager
def using_adapter(model, adapter):
    prev = model.adapter
    model.adapter = adapter
    try:
        yield model
    finally:
        model.adapter = prev


def _scored_logprobs(model, srcs, outs, src_len, out_len):
    with ad.no_grad():
        lp, mask = batch_token_logprobs(model, srcs, outs, src_len, out_len)
    return np.where(mask, lp.data, 0.0), mask


def whiten(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance over masked entries (centred only if variance is 0)."""
    v = values[mask]
    out = np.zeros_like(values)
    if v.size == 0:
        return out
    centred = v - v.mean()
    var = float(np.mean(centred * centred))
    out[mask] = centred / math.sqrt(var) if var > 0 else centred
    return out


def shape_rewards(seq_rewards, kl, mask, beta):
    """Per-token ``-beta * kl`` plus the sequence reward on each row's last token."""
    shaped = -beta * kl * mask
    last = mask.sum(axis=1) - 1
    rows = np.arange(len(seq_rewards))
    shaped[rows, last] += seq_rewards
    return shaped


def rewards_to_go(shaped, mask):
    out = np.cumsum((shaped * mask)[:, ::-1], axis=1)[:, ::-1]
    return np.where(mask, out, 0.0)


def _reward_value(r):
    if isinstance(r, RewardBreakdown):
        return r.total, r
    return float(r), None


def generate_rollouts(policy, sft_adapter, prompts, sampling: SamplingConfig, reward_fn: Callable,
                      beta: float, rng=None, max_input: int = 256) -> RolloutBatch:
    """Sample one response per prompt and attach logprobs, rewards and advantages."""
    prompts = [p if isinstance(p, Prompt) else Prompt(p, p) for p in prompts]
    max_in = min(max_input, policy.config.max_seq_len)
    srcs = [tokenize(p.text, max_in).ids or [0] for p in prompts]
    responses = generate_batch(policy, srcs, sampling, rng)
    outs = [list(r) for r in responses]
    src_len = max(len(s) for s in srcs)
    out_len = max(len(o) for o in outs)
    logprobs, mask = _scored_logprobs(policy, srcs, outs, src_len, out_len)
    with using_adapter(policy, sft_adapter):
        ref_logprobs, _ = _scored_logprobs(policy, srcs, outs, src_len, out_len)
    texts = [detokenize(o) for o in outs]
    rewards, breakdowns = [], []
    for i, (p, y) in enumerate(zip(prompts, texts)):
        try:
            value, bd = _reward_value(reward_fn(p.topic, y))
        except RewardError as exc:
            raise PPOError(f"reward scoring failed for rollout {i}: {exc}") from exc
        if not math.isfinite(value):
            raise PPOError(f"reward for rollout {i} is not finite: {value}")
        rewards.append(value)
        breakdowns.append(bd)
    rewards = np.asarray(rewards, dtype=np.float64)
    kl = np.where(mask, logprobs - ref_logprobs, 0.0)
    shaped = shape_rewards(rewards, kl, mask, beta)
    returns = rewards_to_go(shaped, mask)
    return RolloutBatch(
        prompts=prompts, src_ids=srcs, responses=responses, logprobs=logprobs, ref_logprobs=ref_logprobs,
        mask=mask, rewards=rewards, breakdowns=breakdowns, kl=kl, shaped=shaped, returns=returns,
        advantages=whiten(returns, mask), beta=beta, src_len=src_len, out_len=out_len, texts=texts,
    )


def compute_sequence_kl(batch: RolloutBatch, weights=None) -> float:
    """Batch mean of the per-sequence sum of ``log pi_RL - log pi_SFT``.

    ``weights`` (summing to 1) replaces the uniform mean, e.g. with the exact
    sequence probabilities when every possible response is enumerated.
    """
    per_seq = (batch.kl * batch.mask).sum(axis=1)
    if weights is None:
        return float(per_seq.mean())
    return float(np.dot(np.asarray(weights, dtype=np.float64), per_seq))


def full_vocab_kl(policy, sft_adapter, batch: RolloutBatch) -> np.ndarray:
    """Exact per-token KL(pi_RL || pi_SFT) over the vocabulary (debug use)."""
    with ad.no_grad():
        logits_rl, _, mask = policy.forward_batch(batch.src_ids, [list(r) for r in batch.responses], batch.src_len, batch.out_len)
        with using_adapter(policy, sft_adapter):
            logits_sft, _, _ = policy.forward_batch(batch.src_ids, [list(r) for r in batch.responses], batch.src_len, batch.out_len)
    lp = kernels.log_softmax_fwd(logits_rl.data)
    lq = kernels.log_softmax_fwd(logits_sft.data)
    kl = (np.exp(lp) * (lp - lq)).sum(axis=-1)
    return np.where(mask, kl, 0.0)


def adaptive_kl_update(beta: float, observed_kl: float, target: float, batch_size: int, horizon: float) -> float:
    """Proportional controller: ``beta * (1 + clip((kl - target)/target, +-0.2) * n / horizon)``."""
    if target <= 0:
        raise ValueError("KL target must be > 0")
    if beta <= 0:
        raise ValueError("beta must be > 0")
    err = min(max((observed_kl - target) / target, -0.2), 0.2)
    return beta * (1.0 + err * batch_size / horizon)


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, cliprange: float) -> np.ndarray:
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - cliprange, 1.0 + cliprange) * adv)


@dataclass
class UpdateStats:
    surrogate_loss: float
    clip_fraction: float
    approx_kl: float
    skipped: int
    minibatches: int
    ratios: list = field(default_factory=list)


def surrogate_loss(policy, batch: RolloutBatch, idx, cliprange: float):
    """Negative mean clipped surrogate over the valid tokens of rows ``idx``."""
    srcs = [batch.src_ids[i] for i in idx]
    outs = [list(batch.responses[i]) for i in idx]
    lp_new, _ = batch_token_logprobs(policy, srcs, outs, batch.src_len, batch.out_len)
    mask = batch.mask[idx]
    log_ratio = lp_new - batch.logprobs[idx]
    ratio = ad.exp(log_ratio)
    adv = batch.advantages[idx]
    obj = ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - cliprange, 1.0 + cliprange) * adv)
    loss = -((obj * mask).sum()) * (1.0 / mask.sum())
    return loss, ratio.data, mask


def ppo_update(policy, batch: RolloutBatch, cfg: PPOConfig, state: AdamState, rng) -> UpdateStats:
    params = adapter_named_params(policy.adapter)
    losses, clipfracs, kls, all_ratios = [], [], [], []
    skipped = total = 0
    n = len(batch)
    for _ in range(cfg.ppo_epochs):
        perm = rng.permutation(n)
        epoch_kl = []
        for start in range(0, n, cfg.mini_batch_size):
            idx = perm[start : start + cfg.mini_batch_size]
            total += 1
            ad.zero_grads(p for _, p in params)
            loss, ratio, mask = surrogate_loss(policy, batch, idx, cfg.cliprange)
            if not np.all(np.isfinite(ratio[mask])) or not math.isfinite(loss.item()):
                ad.current_record().clear()
                skipped += 1
                log.warning("skipping mini-batch with non-finite ratio (%d skipped so far)", skipped)
                continue
            ad.backward(loss)
            adam_step(params, state, cfg.learning_rate, cfg.grad_clip_norm)
            r = ratio[mask]
            all_ratios.append(r)
            losses.append(loss.item())
            clipfracs.append(float(np.mean(np.abs(r - 1.0) > cfg.cliprange)))
            epoch_kl.append(float(np.mean(-np.log(r))))
        if epoch_kl:
            kls.append(float(np.mean(epoch_kl)))
        if cfg.early_stop and epoch_kl and np.mean(epoch_kl) > cfg.target_kl:
            log.info("early stop: per-token KL %.4f > target_kl %.4f", np.mean(epoch_kl), cfg.target_kl)
            break
    return UpdateStats(
        surrogate_loss=float(np.mean(losses)) if losses else float("nan"),
        clip_fraction=float(np.mean(clipfracs)) if clipfracs else 0.0,
        approx_kl=float(np.mean(kls)) if kls else 0.0,
        skipped=skipped,
        minibatches=total,
        ratios=all_ratios,
    )


@dataclass
class PPOResult:
    mean_rewards: list
    kls: list
    betas: list
    surrogate_losses: list
    final_checkpoint: str | None = None


def _mean_component(breakdowns, attr):
    vals = [getattr(b, attr) for b in breakdowns if b is not None]
    return float(np.mean(vals)) if vals else ""


def train_phase3(policy, prompts, reward_fn: Callable, cfg: PPOConfig, metrics_path=None,
                 checkpoint_dir=None, base_hash=None) -> PPOResult:
    """Rollout, score, update and adapt beta for ``cfg.total_steps`` batches."""
    if policy.adapter is None:
        raise PPOError("phase3 needs a policy with an attached adapter (the SFT state)")
    if not prompts:
        raise PPOError("phase3 needs at least one prompt")
    unfrozen = [n for n, p in policy.params.items() if p.requires_grad]
    if unfrozen:
        raise PPOError(f"phase3 base must be frozen; trainable base tensors: {unfrozen[:3]}")
    prompts = [p if isinstance(p, Prompt) else Prompt(p, p) for p in prompts]
    start_hash = policy.param_hash()
    base_hash = base_hash or start_hash
    sft = policy.adapter.copy(trainable=False)
    for t in policy.adapter.pairs.values():
        for x in t:
            x.requires_grad = True
    policy.training = False
    state = AdamState()
    beta = cfg.init_kl_coeff
    sampling = SamplingConfig(
        top_k=policy.config.vocab_size, top_p=1.0, temperature=cfg.temperature,
        max_new_tokens=cfg.max_new_tokens, do_sample=True, seed=cfg.seed,
    )
    writer = MetricsWriter(metrics_path, METRIC_FIELDS) if metrics_path else None
    result = PPOResult([], [], [], [])
    ckpt_root = Path(checkpoint_dir) if checkpoint_dir else None
    try:
        for b in range(cfg.total_steps):
            pick = np.random.default_rng([cfg.seed, b, 0]).integers(0, len(prompts), size=cfg.batch_size)
            try:
                batch = generate_rollouts(
                    policy, sft, [prompts[i] for i in pick], sampling, reward_fn, beta,
                    rng=np.random.default_rng([cfg.seed, b, 1]), max_input=cfg.max_input_tokens,
                )
                stats = ppo_update(policy, batch, cfg, state, np.random.default_rng([cfg.seed, b, 2]))
            except PPOError as exc:
                raise PPOError(f"batch {b}: {exc}") from exc
            kl = compute_sequence_kl(batch)
            mean_reward = float(batch.rewards.mean())
            result.mean_rewards.append(mean_reward)
            result.kls.append(kl)
            result.betas.append(beta)
            result.surrogate_losses.append(stats.surrogate_loss)
            if writer:
                writer.row(
                    batch=b, mean_reward=mean_reward,
                    pc_mean=_mean_component(batch.breakdowns, "pc_raw"),
                    aq_mean=_mean_component(batch.breakdowns, "aq_raw"),
                    tox_mean=_mean_component(batch.breakdowns, "tox_raw"),
                    kl=kl, beta=beta, surrogate_loss=stats.surrogate_loss,
                )
            log.info("ppo batch %d reward %.4f kl %.4f beta %.5f", b, mean_reward, kl, beta)
            if cfg.adaptive_kl:
                beta = adaptive_kl_update(beta, kl, cfg.adaptive_target, cfg.batch_size, cfg.horizon)
            if ckpt_root and ((b + 1) % cfg.checkpoint_every == 0 or b + 1 == cfg.total_steps):
                path = ckpt_root / "phase3" / ("batch_%06d.carl" % (b + 1))
                save_adapter(path, policy.adapter, base_hash=base_hash, kind="ppo-policy",
                             meta={"batch": b + 1, "beta": beta})
                final = ckpt_root / "phase3" / "final.carl"
                save_adapter(final, policy.adapter, base_hash=base_hash, kind="ppo-policy",
                             meta={"batch": b + 1, "beta": beta})
                result.final_checkpoint = str(final)
    finally:
        if writer:
            writer.close()
    if policy.param_hash() != start_hash:
        raise PPOError("frozen base parameters changed during phase 3")
    return result
