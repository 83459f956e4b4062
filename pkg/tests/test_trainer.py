import math

import numpy as np
import pytest

from pal.connector import ConnectorConfig
from pal.model import AttentionOnly, ModelConfig, PalModel
from pal.synth import VOCAB, make_default_ensemble
from pal.tensor import Tensor, backward, tape
from pal.trainer import (AdamW, TASK_MIX_BY_STAGE, TrainingDivergedError,
                         StageConfig, build_batch, cosine_lr, default_stages,
                         evaluate_accuracy, heldout_samples,
                         layout_for_tokens, masked_next_token_loss, run_stage,
                         smoothed)

MINI = ModelConfig(d_model=8, n_layers=2, n_heads=2, ffn_hidden=16, max_seq=64)
CONN = ConnectorConfig(latent_grid=(2, 1), latent_dim=8, llm_dim=8, n_heads=2)


def _mini():
    profiles = make_default_ensemble(3)
    return PalModel(MINI, AttentionOnly(start_layer=1), CONN, profiles, 0), \
        profiles


# ---------------------------------------------------------------------------
# loss

def test_loss_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((2, 5, 64)))
    targets = np.zeros((2, 5), dtype=int)
    mask = np.zeros((2, 5), dtype=bool)
    mask[:, -2:] = True
    loss = masked_next_token_loss(logits, targets, mask)
    np.testing.assert_allclose(loss.item(), math.log(64.0), rtol=1e-14)


def test_loss_delta_spike_is_near_zero():
    logits = np.zeros((1, 3, 64))
    targets = np.array([[4, 9, 2]])
    logits[0, np.arange(3), targets[0]] = 50.0
    mask = np.ones((1, 3), dtype=bool)
    loss = masked_next_token_loss(Tensor(logits), targets, mask)
    assert loss.item() < 1e-12


def test_loss_counts_only_masked_positions():
    # Masked position carries all the loss; unmasked positions none.
    logits = np.zeros((1, 2, 64))
    logits[0, 1, 7] = 50.0  # unmasked, would be near-zero loss anyway
    targets = np.array([[0, 7]])
    only_first = np.array([[True, False]])
    loss = masked_next_token_loss(Tensor(logits), targets, only_first)
    np.testing.assert_allclose(loss.item(), math.log(64.0), rtol=1e-14)


def test_loss_gradient_zero_outside_mask():
    logits = Tensor(np.zeros((1, 4, 64)), requires_grad=True)
    targets = np.array([[1, 2, 3, 4]])
    mask = np.array([[False, True, False, True]])
    with tape() as tp:
        loss = masked_next_token_loss(logits, targets, mask)
    backward(loss, tp)
    g = logits.grad
    np.testing.assert_array_equal(g[0, 0], 0.0)
    np.testing.assert_array_equal(g[0, 2], 0.0)
    assert np.abs(g[0, 1]).sum() > 0 and np.abs(g[0, 3]).sum() > 0


def test_loss_rejects_empty_mask_and_bad_shapes():
    logits = Tensor(np.zeros((1, 2, 64)))
    with pytest.raises(ValueError, match="no positions"):
        masked_next_token_loss(logits, np.zeros((1, 2), int),
                               np.zeros((1, 2), bool))
    with pytest.raises(ValueError, match="shape"):
        masked_next_token_loss(logits, np.zeros((1, 3), int),
                               np.ones((1, 3), bool))


# ---------------------------------------------------------------------------
# schedule

def test_cosine_schedule_boundaries():
    peak, total, ratio = 1e-3, 2000, 0.05
    warmup = int(ratio * total)  # 100
    assert cosine_lr(0, total, peak, ratio) == 0.0
    np.testing.assert_allclose(cosine_lr(warmup, total, peak, ratio), peak)
    np.testing.assert_allclose(cosine_lr(total, total, peak, ratio), 0.0,
                               atol=1e-18)
    np.testing.assert_allclose(cosine_lr(50, total, peak, ratio), peak / 2)
    mid = warmup + (total - warmup) // 2
    assert cosine_lr(mid, total, peak, ratio) < peak


def test_cosine_schedule_monotone_warmup_then_decay():
    vals = [cosine_lr(s, 100, 1.0, 0.1) for s in range(101)]
    assert all(b > a for a, b in zip(vals[:10], vals[1:11]))
    assert all(b <= a for a, b in zip(vals[10:100], vals[11:101]))


def test_cosine_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0, 0.1)


def test_adamw_single_step_hand_computed():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"x": x})
    x.grad = np.array([2.0])  # gradient of x^2 at 1
    opt.step(lr=0.1)
    m_hat = 0.1 * 2.0 / (1 - 0.9)
    v_hat = 0.001 * 4.0 / (1 - 0.999)
    want = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    want -= 0.1 * 0.01 * want  # decoupled weight decay
    np.testing.assert_allclose(x.data, [want], rtol=1e-12)


def test_adamw_skips_gradless_params():
    x = Tensor(np.array([5.0]), requires_grad=True)
    opt = AdamW({"x": x})
    opt.step(lr=0.1)
    np.testing.assert_array_equal(x.data, [5.0])


# ---------------------------------------------------------------------------
# data plumbing

def test_build_batch_deterministic_and_mixed():
    profiles = make_default_ensemble(0)
    s1, t1, m1, f1 = build_batch(0, 3, 5, 32, TASK_MIX_BY_STAGE[3], profiles)
    s2, t2, m2, f2 = build_batch(0, 3, 5, 32, TASK_MIX_BY_STAGE[3], profiles)
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(f1["fine"].data, f2["fine"].data)
    assert {s.task_kind for s in s1} == set(TASK_MIX_BY_STAGE[3])
    assert t1.shape == (32, 9) and m1.shape == (32, 9)
    assert not np.array_equal(
        t1, build_batch(0, 3, 6, 32, TASK_MIX_BY_STAGE[3], profiles)[1])


def test_heldout_disjoint_between_stages_and_deterministic():
    a = heldout_samples(0, 1, "classify", 5)
    b = heldout_samples(0, 1, "classify", 5)
    c = heldout_samples(0, 2, "classify", 5)
    assert [s.seed for s in a] == [s.seed for s in b]
    assert {s.seed for s in a}.isdisjoint({s.seed for s in c})


def test_layout_for_tokens():
    model, _ = _mini()
    layout = layout_for_tokens(np.zeros((4, 9), int), model)
    assert (layout.sys_len, layout.n_audio, layout.user_len,
            layout.resp_len) == (2, 2, 5, 2)


class _OracleDecoder:
    """Stub model that always emits the right answer token."""

    def __init__(self, answers):
        self._answers = iter(answers)

    def decode_greedy_batch(self, prompts, feats, max_new):
        out = np.full((len(prompts), max_new), VOCAB.eos, dtype=np.int64)
        for i in range(len(prompts)):
            out[i, 0] = next(self._answers)
        return out


def test_evaluate_accuracy_exact_match_on_answer_token():
    profiles = make_default_ensemble(0)
    samples = heldout_samples(1, 1, "classify", 6)
    answers = [s.response_tokens[0] for s in samples]
    assert evaluate_accuracy(_OracleDecoder(answers), profiles, samples) == 1.0
    wrong = [(a + 1) % 64 for a in answers]
    assert evaluate_accuracy(_OracleDecoder(wrong), profiles, samples) == 0.0


# ---------------------------------------------------------------------------
# stages

def test_default_stages_hyperparameters():
    stages = default_stages((2000, 2000, 3000))
    assert [s.steps for s in stages] == [2000, 2000, 3000]
    assert [s.peak_lr for s in stages] == [1e-3, 1e-4, 1e-4]
    assert [s.warmup_ratio for s in stages] == [0.05, 0.03, 0.03]
    assert stages[2].task_mix == ("classify", "first_event", "count")
    with pytest.raises(ValueError):
        StageConfig(4, 10)


def test_run_stage_trains_connector_only_and_logs_metrics():
    model, profiles = _mini()
    before = {k: v.data.copy()
              for k, v in model.transformer_parameters().items()}
    seen = []
    stage = StageConfig(1, 6, batch_size=4, peak_lr=1e-3, warmup_ratio=0.5,
                        task_mix=("classify",))
    report = run_stage(stage, model, profiles, master_seed=1,
                       metrics=lambda *r: seen.append(r), eval_n=4)
    assert len(report.losses) == 6 and len(seen) == 6
    for step, stage_id, lr, loss in seen:
        assert stage_id == 1
        np.testing.assert_allclose(lr, cosine_lr(step, 6, 1e-3, 0.5))
        assert math.isfinite(loss)
    for k, v in model.transformer_parameters().items():
        np.testing.assert_array_equal(before[k], v.data)
        assert v.requires_grad  # restored after the frozen stage
    assert "classify" in report.heldout_accuracy


def test_run_stage_later_stages_train_transformer():
    model, profiles = _mini()
    before = model.params["layers.1.attn.wq"].data.copy()
    stage = StageConfig(2, 3, batch_size=4, peak_lr=1e-3, warmup_ratio=0.0,
                        task_mix=("classify", "first_event"))
    run_stage(stage, model, profiles, master_seed=2, eval_n=4)
    assert not np.array_equal(before, model.params["layers.1.attn.wq"].data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_training_raises_with_step():
    model, profiles = _mini()
    model.params["emb"].data[:] = 1e200  # forces overflow in layer 1 matmul
    stage = StageConfig(2, 2, batch_size=4, peak_lr=1e-4, warmup_ratio=0.0,
                        task_mix=("classify",))
    with pytest.raises(TrainingDivergedError, match="step 0"):
        run_stage(stage, model, profiles, master_seed=3, eval_n=4)


def test_smoothed_window_mean():
    vals = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_allclose(smoothed(vals, window=2),
                               [1.0, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(smoothed(vals, window=10),
                               [1.0, 1.5, 2.0, 2.5])
