"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (shown even without ``-s``)
and enforces its runtime budget. Run just these with
``pytest tests/test_acceptance.py -v``.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import perturbed_model, run_pipeline, tiny_config
from coarl import autodiff as ad
from coarl import data, train
from coarl.data import PromptSample, bm25_scores, build_multitask_mixture, load_records, resource_path
from coarl.lora import LoraConfig, attach, merge
from coarl.metrics import category_accuracy, meteor_simplified, rouge_n
from coarl.model import ModelConfig, SamplingConfig, Seq2SeqModel
from coarl.ppo import PPOConfig, compute_sequence_kl, generate_rollouts, surrogate_loss, train_phase3
from coarl.reward import combine


@contextmanager
def criterion(capsys, number, title, budget_s):
    start = time.perf_counter()
    ok, detail = False, ""
    try:
        yield
        elapsed = time.perf_counter() - start
        ok = elapsed < budget_s
        detail = f"{elapsed:.1f}s (budget {budget_s:g}s)"
        assert ok, f"criterion {number} exceeded its runtime budget: {detail}"
    except BaseException as exc:
        detail = detail or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}")


def _p(shape, seed, scale=1.0):
    return ad.parameter(np.random.default_rng(seed).normal(0, scale, shape))


def _op_cases():
    a, b, c = _p((3, 4), 0), _p((4,), 1), _p((2, 1), 2)
    x3, w = _p((2, 3, 4), 3), _p((4, 5), 4)
    bm = _p((2, 4, 2), 5)
    k = ad.parameter(np.array([-2.0, -0.3, 0.1, 0.45, 3.0]))
    m1, m2 = ad.parameter(np.array([1.0, -2.0, 0.3])), ad.parameter(np.array([0.5, -1.0, 0.9]))
    g, bias = _p((4,), 6), _p((4,), 7)
    table = _p((6, 3), 8)
    ids = np.array([[1, 1, 4], [0, 5, 1]])
    r = np.random.default_rng(9).normal(size=(2, 3, 4))
    t = np.array([[1, -100, 3], [0, 2, -100]])
    return {
        "add": (lambda: ad.tsum(ad.add(a, b) * ad.add(a, b)), [a, b]),
        "mul/neg": (lambda: ad.tsum(ad.neg(ad.mul(c, c)) * c), [c]),
        "exp": (lambda: ad.tsum(ad.exp(b * 0.5)), [b]),
        "clip": (lambda: ad.tsum(ad.clip(k, -0.5, 0.5) * k), [k]),
        "minimum": (lambda: ad.tsum(ad.minimum(m1 * m1, m2)), [m1, m2]),
        "gelu": (lambda: ad.tsum(ad.gelu(a * 2.0)), [a]),
        "matmul": (lambda: ad.tsum(ad.matmul(x3, w) * ad.matmul(x3, w)), [x3, w]),
        "batched matmul": (lambda: ad.tsum(ad.exp(ad.matmul(x3, bm) * 0.1)), [x3, bm]),
        "reshape/transpose/sum": (
            lambda: ad.tsum(ad.exp(ad.tsum(ad.transpose(x3, (1, 0, 2)), axis=0).reshape(8) * 0.3)), [x3]),
        "softmax": (lambda: ad.tsum(ad.softmax(x3, 1) * r), [x3]),
        "log_softmax": (lambda: ad.tsum(ad.log_softmax(x3) * r), [x3]),
        "layer_norm": (lambda: ad.tsum(ad.layer_norm(x3, g, bias) * r), [x3, g, bias]),
        "embedding_lookup": (lambda: ad.tsum(ad.exp(ad.embedding_lookup(table, ids))), [table]),
        "gather_last": (lambda: ad.tsum(ad.exp(ad.gather_last(x3, np.array([[0, 3, 2], [1, 1, 3]])))), [x3]),
        "cross_entropy": (lambda: ad.cross_entropy(x3, t), [x3]),
        "dropout": (lambda: ad.tsum(ad.dropout(a, 0.5, np.random.default_rng(7)) * a), [a]),
    }


def test_criterion_1_gradients(capsys):
    with criterion(capsys, 1, "gradient suite", 60):
        worst = {}
        for name, (fn, params) in _op_cases().items():
            worst[name] = max(ad.gradient_check(fn, params).values())
        model = perturbed_model()
        src, tgt = [[5, 6, 7, 8], [9, 10]], [[11, 12, 13], [14, 15, 16, 17]]

        def model_loss():
            logits, ids, mask = model.forward_batch(src, tgt)
            return ad.cross_entropy(logits, np.where(mask, ids, -100))

        worst["model loss"] = max(ad.gradient_check(model_loss, model.named_parameters()).values())
        bad = {k: v for k, v in worst.items() if v > 1e-6}
        assert not bad, bad


def test_criterion_2_lora(capsys):
    with criterion(capsys, 2, "LoRA identity", 60):
        rng = np.random.default_rng(0)
        model = perturbed_model(tiny_config())
        inputs = [(rng.integers(3, 259, rng.integers(1, 8)).tolist(), rng.integers(3, 259, rng.integers(1, 8)).tolist())
                  for _ in range(20)]
        with ad.no_grad():
            before = [model.forward_batch([s], [t])[0].data.copy() for s, t in inputs]
            adapter = attach(model, LoraConfig(rank=2, alpha=4.0), seed=1)
            after = [model.forward_batch([s], [t])[0].data for s, t in inputs]
        for x, y in zip(before, after):
            np.testing.assert_array_equal(x, y)

        for _, bmat in adapter.pairs.values():
            bmat.data += rng.normal(0, 0.3, bmat.shape)
        with ad.no_grad():
            adapted = [model.forward_batch([s], [t])[0].data.copy() for s, t in inputs]
            merged = merge(model)
            folded = [merged.forward_batch([s], [t])[0].data for s, t in inputs]
        assert max(float(np.max(np.abs(x - y))) for x, y in zip(adapted, folded)) <= 1e-9

        model = perturbed_model(tiny_config(max_seq_len=32))
        attach(model, LoraConfig(rank=2, alpha=4.0), seed=1)
        base_hash = model.param_hash()
        samples = [PromptSample("I8", f"hs {i}", f"cs {i}") for i in range(8)]
        res = train.train_phase2(model, samples, train.TrainConfig(learning_rate=1e-2, batch_size=4, epochs=100, max_steps=200))
        assert res.steps == 200
        assert model.param_hash() == base_hash


def test_criterion_3_reward(capsys):
    with criterion(capsys, 3, "reward algebra", 10):
        assert combine(-1, 1, 0).total == 1.0
        assert combine(1, 0, 1).total == 0.0
        assert combine(0, 0.5, 0.5).total == 0.5
        assert combine(-1, 0, 1).total == pytest.approx(1 / 3, abs=1e-15)
        rng = np.random.default_rng(0)
        violations = 0
        for _ in range(10_000):
            pc, aq, tox = rng.uniform(-1, 1), rng.uniform(0, 1), rng.uniform(0, 1)
            base = combine(pc, aq, tox).total
            violations += combine(rng.uniform(-1, pc), aq, tox).total < base
            violations += combine(pc, rng.uniform(aq, 1), tox).total < base
            violations += combine(pc, aq, rng.uniform(0, tox)).total < base
        assert violations == 0


def test_criterion_4_ppo_null(capsys):
    with criterion(capsys, 4, "PPO null tests", 60):
        model = Seq2SeqModel(tiny_config(d_model=16, d_ff=32), seed=0)
        adapter = attach(model, LoraConfig(rank=2, alpha=4.0), seed=0)
        rng = np.random.default_rng(1)
        for _, bmat in adapter.pairs.values():
            bmat.data += rng.normal(0, 0.2, bmat.shape)
        sampling = SamplingConfig(top_k=259, max_new_tokens=6, do_sample=True)
        batch = generate_rollouts(model, adapter.copy(trainable=False), [f"p{i}" for i in range(8)], sampling,
                                  lambda x, y: 0.3, 0.03, np.random.default_rng(0))
        assert abs(compute_sequence_kl(batch)) <= 1e-12
        idx = np.arange(len(batch))
        _, ratio, mask = surrogate_loss(model, batch, idx, 0.25)
        ad.current_record().clear()
        assert np.max(np.abs(ratio[mask] - 1.0)) <= 1e-12

        batch.advantages = np.zeros_like(batch.advantages)
        ad.zero_grads(adapter.trainable_parameters())
        loss, _, _ = surrogate_loss(model, batch, idx, 0.25)
        ad.backward(loss)
        for t in adapter.trainable_parameters():
            np.testing.assert_array_equal(t.grad, 0.0)


def _phase1_loss_drop(seed=0):
    mixture = build_multitask_mixture(load_records(resource_path("fixtures/explanations_sample.jsonl")), seed=seed)
    assert len(mixture) == 14
    model = Seq2SeqModel(ModelConfig(), seed=seed)
    start = train.evaluate_loss(model, mixture)
    res = train.train_phase1(model, mixture, train.TrainConfig(learning_rate=3e-3, batch_size=8, max_steps=200, seed=seed))
    assert res.steps == 200
    return model, start, train.evaluate_loss(model, mixture)


def _synthetic_pairs():
    letters = "abcdefghijklmnop"
    intents = ["INF", "POS", "QUE", "DEN"]
    recs = [data.CSRecord(id=f"s{i:02d}", hate_speech=f"group {c} people are bad", intent=intents[i % 4],
                          counterspeech=f"reply {c}: respect them") for i, c in enumerate(letters)]
    return data.counterspeech_samples(recs)


def test_criterion_5_overfit(capsys):
    with criterion(capsys, 5, "desk overfit", 300):
        model, p1_start, p1_end = _phase1_loss_drop()
        assert abs(p1_start - math.log(259)) <= 0.1, p1_start
        assert 1 - p1_end / p1_start >= 0.9, (p1_start, p1_end)

        samples = _synthetic_pairs()
        attach(model, LoraConfig(), seed=1)
        p2_start = train.evaluate_loss(model, samples)
        res = train.train_phase2(model, samples, train.TrainConfig(learning_rate=1e-2, batch_size=8, max_steps=200))
        assert res.steps == 200
        p2_end = train.evaluate_loss(model, samples)
        assert 1 - p2_end / p2_start >= 0.9, (p2_start, p2_end)
        with capsys.disabled():
            print(f"\n  phase1 {p1_start:.4f} -> {p1_end:.4f}; phase2 {p2_start:.4f} -> {p2_end:.4f}")


def test_criterion_6_rl_lift(capsys):
    with criterion(capsys, 6, "RL lift", 900):
        cfg = ModelConfig(d_model=32, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=64, max_seq_len=32)
        model = Seq2SeqModel(cfg, seed=0)
        prompts = [f"p{i}" for i in range(8)]
        targets = ("ab", "ba", "aa", "bb", "abab", "baba", "az", "bbb")
        # a short SFT stage so that 'z' is reachable by sampling, as a real SFT policy would be
        train.train_phase1(model, [PromptSample("I8", p, t) for p in prompts for t in targets],
                           train.TrainConfig(learning_rate=3e-3, batch_size=8, epochs=100, seed=0))
        adapter = attach(model, LoraConfig(rank=4, alpha=8.0), seed=0)

        def rigged(x, y):
            return float("z" in y)

        sampling = SamplingConfig(top_k=259, max_new_tokens=4, do_sample=True)
        sft = adapter.copy(trainable=False)
        baseline = np.mean([
            generate_rollouts(model, sft, [prompts[i % 8] for i in range(16)], sampling, rigged, 0.03,
                              np.random.default_rng([99, k])).rewards.mean()
            for k in range(10)
        ])

        pcfg = PPOConfig(learning_rate=1e-3, batch_size=16, mini_batch_size=4, ppo_epochs=2, total_steps=300,
                         max_new_tokens=4, init_kl_coeff=0.03, adaptive_target=1.0, horizon=1000)
        res = train_phase3(model, prompts, rigged, pcfg)
        final = float(np.mean(res.mean_rewards[-30:]))
        assert final - baseline >= 0.2, (baseline, final)

        betas, kls = np.array(res.betas), np.array(res.kls)
        step = np.sign(np.diff(betas))
        wanted = np.sign(kls[:-1] - pcfg.adaptive_target)
        assert np.array_equal(step, wanted)
        assert (wanted > 0).any() and (wanted < 0).any(), "KL never crossed the target"
        with capsys.disabled():
            print(f"\n  reward {baseline:.3f} -> {final:.3f}; beta {betas[0]:.4f} -> {betas[-1]:.4f}")


def test_criterion_7_metrics(capsys):
    with criterion(capsys, 7, "metric oracles", 10):
        assert rouge_n("the cat sat", "the cat", 1) == pytest.approx(0.8, abs=1e-15)
        assert meteor_simplified("cat", "cat") == pytest.approx(0.5, abs=1e-15)
        assert category_accuracy("Why would you say that?", "QUE") == 1
        assert category_accuracy("According to studies, that is false.", "QUE") == 0
        assert category_accuracy("Everyone deserves kindness.", "POS") == 1
        docs = ["the cat sat", "the dog sat down", "a cat and a dog", "birds fly", "the the cat"]
        expected = [2.0522322761753053, 1.3192269302852462, 0.4519836127220292, 0.0, 1.3327308486630227]
        np.testing.assert_allclose(bm25_scores("cat sat the", docs), expected, rtol=0, atol=1e-9)


def test_criterion_8_determinism(capsys, tmp_path):
    with criterion(capsys, 8, "determinism", 600):
        a = run_pipeline(tmp_path / "a")
        b = run_pipeline(tmp_path / "b")
        compared = [k for k in a if k.endswith((".carl", ".csv"))]
        assert any("phase3" in k for k in compared)
        assert a.keys() == b.keys()
        assert [k for k in compared if a[k] != b[k]] == []
