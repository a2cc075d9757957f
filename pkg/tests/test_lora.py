import numpy as np
import pytest

from coarl import autodiff as ad
from coarl.checkpoint import CheckpointError
from coarl.lora import LoraConfig, LoraError, attach, load_adapter, merge, save_adapter, target_names
from coarl.model import Seq2SeqModel, forward
from coarl.train import TrainConfig, adam_step, adapter_named_params, train_phase2
from coarl.data import PromptSample

from conftest import perturbed_model, tiny_config


def _inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [(list(rng.integers(0, 256, rng.integers(1, 6))), list(rng.integers(0, 256, rng.integers(1, 6)))) for _ in range(n)]


def _randomise_b(adapter, seed=1, scale=0.2):
    rng = np.random.default_rng(seed)
    for _, b in adapter.pairs.values():
        b.data[:] = rng.normal(0, scale, b.shape)


class TestConfig:
    def test_default_scale(self):
        assert LoraConfig(rank=16, alpha=32).scale == 2.0

    def test_rank_must_be_below_d_model(self):
        with pytest.raises(LoraError, match="rank"):
            attach(Seq2SeqModel(tiny_config()), LoraConfig(rank=8))

    @pytest.mark.parametrize("kw", [dict(rank=0), dict(alpha=0), dict(dropout=1.0), dict(targets=["nope"]), dict(blocks=["x"])])
    def test_invalid(self, kw):
        with pytest.raises(LoraError):
            LoraConfig(**kw)

    def test_default_targets_cover_q_v_everywhere(self):
        m = Seq2SeqModel(tiny_config(n_enc_layers=2, n_dec_layers=1))
        names = target_names(m, LoraConfig(rank=2))
        assert names == [
            "enc.0.self_attn.wq", "enc.0.self_attn.wv", "enc.1.self_attn.wq", "enc.1.self_attn.wv",
            "dec.0.self_attn.wq", "dec.0.self_attn.wv", "dec.0.cross_attn.wq", "dec.0.cross_attn.wv",
        ]

    def test_block_subset(self):
        m = Seq2SeqModel(tiny_config())
        assert target_names(m, LoraConfig(rank=2, blocks=["decoder_cross"])) == ["dec.0.cross_attn.wq", "dec.0.cross_attn.wv"]


class TestAttach:
    def test_identity_at_init_bitwise(self):
        m = perturbed_model()
        before = [forward(m, s, t).data.copy() for s, t in _inputs(5)]
        attach(m, LoraConfig(rank=2), seed=0)
        for (s, t), ref in zip(_inputs(5), before):
            assert forward(m, s, t).data.tobytes() == ref.tobytes()

    def test_init_distributions(self):
        m = Seq2SeqModel(tiny_config())
        a = attach(m, LoraConfig(rank=3), seed=0)
        bound = 1 / np.sqrt(8)
        for A, B in a.pairs.values():
            assert A.shape == (3, 8) and B.shape == (8, 3)
            assert np.all(np.abs(A.data) <= bound)
            assert np.all(B.data == 0)

    def test_base_frozen(self):
        m = Seq2SeqModel(tiny_config())
        attach(m, LoraConfig(rank=2))
        assert not any(p.requires_grad for p in m.params.values())
        assert len(m.trainable_parameters()) == 2 * len(m.adapter.pairs)

    def test_branch_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        W, A, B, x = rng.normal(size=(4, 4)), rng.normal(size=(2, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 4))
        scale = 32 / 2
        merged = x @ (W + scale * (B @ A).T)
        wrapped = x @ W + scale * (x @ A.T) @ B.T
        np.testing.assert_allclose(merged, wrapped, atol=1e-12)

    def test_adapter_gradients(self):
        m = perturbed_model()
        a = attach(m, LoraConfig(rank=2, dropout=0.0), seed=1)
        _randomise_b(a)
        src, tgt = [[1, 2, 3], [4, 5]], [[6, 7], [8, 9, 10]]

        def loss_fn():
            logits, ids, mask = m.forward_batch(src, tgt)
            return ad.cross_entropy(logits, np.where(mask, ids, -100))

        errs = ad.gradient_check(loss_fn, adapter_named_params(a))
        assert max(errs.values()) <= 1e-6


class TestMerge:
    def test_zero_adapter_merge_is_bit_identical(self):
        m = Seq2SeqModel(tiny_config())
        base = m.param_hash()
        attach(m, LoraConfig(rank=2))
        merged = merge(m)
        assert merged.adapter is None and merged.param_hash() == base

    def test_merged_logits_match(self):
        m = perturbed_model()
        a = attach(m, LoraConfig(rank=2), seed=2)
        _randomise_b(a)
        merged = merge(m)
        for s, t in _inputs(10, 3):
            diff = np.max(np.abs(forward(m, s, t).data - forward(merged, s, t).data))
            assert diff <= 1e-9

    def test_merge_does_not_touch_source(self):
        m = perturbed_model()
        base = m.param_hash()
        a = attach(m, LoraConfig(rank=2))
        _randomise_b(a)
        merge(m)
        assert m.param_hash() == base


class TestTraining:
    def test_steps_move_a_and_b_but_not_base(self):
        m = perturbed_model()
        a = attach(m, LoraConfig(rank=2, dropout=0.0), seed=0)
        base = m.param_hash()
        A0 = {n: p[0].data.copy() for n, p in a.pairs.items()}
        samples = [PromptSample("I8", "ab", "cd"), PromptSample("I8", "ef", "gh")]
        train_phase2(m, samples, TrainConfig(learning_rate=1e-2, batch_size=2, epochs=2))
        assert m.param_hash() == base
        assert any(np.any(b.data != 0) for _, b in a.pairs.values())
        assert any(np.any(p[0].data != A0[n]) for n, p in a.pairs.items())

    def test_adam_skips_frozen(self):
        m = Seq2SeqModel(tiny_config())
        attach(m, LoraConfig(rank=2))
        from coarl.train import AdamState, model_named_params

        for _, p in model_named_params(m):
            p.grad = np.ones_like(p.data)
        st = AdamState()
        base = m.param_hash()
        adam_step(model_named_params(m), st, 1.0)
        assert m.param_hash() == base and st.m == {}


class TestSaveLoad:
    def test_round_trip_logits_identical(self, tmp_path):
        m = perturbed_model()
        a = attach(m, LoraConfig(rank=2), seed=5)
        _randomise_b(a)
        ref = forward(m, [1, 2, 3], [4, 5]).data.copy()
        save_adapter(tmp_path / "a.carl", a, base_hash=m.param_hash())
        m.adapter = None
        load_adapter(tmp_path / "a.carl", m)
        assert forward(m, [1, 2, 3], [4, 5]).data.tobytes() == ref.tobytes()

    def test_adapter_file_is_small(self, tmp_path):
        m = Seq2SeqModel(tiny_config())
        a = attach(m, LoraConfig(rank=2))
        path = tmp_path / "a.carl"
        save_adapter(path, a)
        raw = path.read_bytes()
        hlen = int.from_bytes(raw[8:16], "little")
        assert len(raw) - 16 - hlen <= len(a.pairs) * 2 * 2 * 8 * 8

    def test_d_model_mismatch(self, tmp_path):
        a = attach(Seq2SeqModel(tiny_config()), LoraConfig(rank=2))
        save_adapter(tmp_path / "a.carl", a)
        with pytest.raises(LoraError, match="d_model"):
            load_adapter(tmp_path / "a.carl", Seq2SeqModel(tiny_config(d_model=16)))

    def test_truncated(self, tmp_path):
        a = attach(Seq2SeqModel(tiny_config()), LoraConfig(rank=2))
        save_adapter(tmp_path / "a.carl", a)
        raw = (tmp_path / "a.carl").read_bytes()
        (tmp_path / "b.carl").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError):
            load_adapter(tmp_path / "b.carl")

    def test_base_hash_mismatch_warns(self, tmp_path, caplog):
        m = Seq2SeqModel(tiny_config())
        a = attach(m, LoraConfig(rank=2))
        save_adapter(tmp_path / "a.carl", a, base_hash="0" * 64)
        load_adapter(tmp_path / "a.carl", m)
        assert "different base" in caplog.text
