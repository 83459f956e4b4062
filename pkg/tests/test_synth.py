import collections

import numpy as np
import pytest

from pal.rng import derive_seed
from pal.synth import (GRID_CLIP, GRID_F, GRID_T, N_CLASSES, VOCAB,
                       EncoderProfile, FeatureGrid, dump_dataset,
                       encode_batch, encoder_forward, generate_sample,
                       load_dataset, make_default_ensemble, make_encoder_set)


def test_sample_generation_is_deterministic():
    a = generate_sample(42, "classify")
    b = generate_sample(42, "classify")
    np.testing.assert_array_equal(a.grid.values, b.grid.values)
    assert a.tokens == b.tokens
    assert a.events == b.events


def test_templates_have_fixed_shape():
    for task in ("classify", "first_event", "count"):
        s = generate_sample(3, task)
        assert len(s.prompt_tokens) == 7
        assert len(s.response_tokens) == 2
        assert s.prompt_tokens[0] == VOCAB.bos
        assert s.prompt_tokens[-1] == VOCAB.answer_marker
        assert s.response_tokens[-1] == VOCAB.eos
        assert s.response_mask == [False] * 7 + [True, True]


def test_grid_bounded_and_correct_shape():
    for seed in range(20):
        g = generate_sample(seed, "count").grid.values
        assert g.shape == (GRID_T, GRID_F)
        assert np.abs(g).max() <= GRID_CLIP


def test_answers_match_events():
    for seed in range(50):
        s = generate_sample(seed, "classify")
        assert s.response_tokens[0] == VOCAB.class_token(s.events[0].class_id)
        f = generate_sample(seed, "first_event")
        first = min(f.events, key=lambda e: e.onset)
        assert f.response_tokens[0] == VOCAB.class_token(first.class_id)
        assert f.events[1].onset >= min(f.events[0].onset + 3, GRID_T - 3)
        c = generate_sample(seed, "count")
        assert c.response_tokens[0] == VOCAB.count_token(len(c.events))


def test_class_balance():
    counts = collections.Counter(
        generate_sample(seed, "classify").events[0].class_id
        for seed in range(3200))
    mean = 3200 / N_CLASSES
    for cid in range(N_CLASSES):
        assert abs(counts[cid] - mean) <= 0.2 * mean, (cid, counts[cid])


def test_classes_linearly_separable_from_raw_grids():
    # Pre-certifies the learnability bar: a linear probe on raw grids must
    # recover the class with >= 95% held-out accuracy.
    sklearn = pytest.importorskip("sklearn")
    from sklearn.linear_model import LogisticRegression

    xs, ys = [], []
    for seed in range(2000):
        s = generate_sample(seed, "classify")
        xs.append(s.grid.values.reshape(-1))
        ys.append(s.events[0].class_id)
    xs, ys = np.asarray(xs), np.asarray(ys)
    clf = LogisticRegression(max_iter=2000).fit(xs[:1500], ys[:1500])
    acc = clf.score(xs[1500:], ys[1500:])
    assert acc >= 0.95, f"linear probe accuracy {acc:.3f}"


def test_invalid_task_and_difficulty_rejected():
    with pytest.raises(ValueError, match="task"):
        generate_sample(0, "transcribe")
    with pytest.raises(ValueError, match="difficulty"):
        generate_sample(0, "classify", "extreme")


# ---------------------------------------------------------------------------
# mock encoders

def test_encoder_zero_grid_gives_zero_tokens():
    p = EncoderProfile("fine", 8, 4, 48, 0)
    out = encoder_forward(p, FeatureGrid(np.zeros((GRID_T, GRID_F))))
    np.testing.assert_array_equal(out.tokens.data, 0.0)


def test_encoder_matches_manual_patch_projection():
    p = EncoderProfile("fine", 8, 4, 48, 7)
    s = generate_sample(5, "classify")
    out = encoder_forward(p, s.grid).tokens.data
    pt, pf = GRID_T // 8, GRID_F // 4
    for ti in range(8):
        for fi in range(4):
            patch = s.grid.values[ti * pt:(ti + 1) * pt,
                                  fi * pf:(fi + 1) * pf].reshape(-1)
            np.testing.assert_allclose(out[ti, fi], patch @ p.projection.data,
                                       rtol=1e-12)


def test_encoder_locality():
    # Changing one patch changes exactly one token.
    p = EncoderProfile("coarse", 4, 2, 16, 3)
    g = generate_sample(6, "classify").grid.values.copy()
    base = encoder_forward(p, FeatureGrid(g)).tokens.data
    g2 = g.copy()
    g2[0:4, 0:4] += 1.0  # patch (0, 0) only
    bumped = encoder_forward(p, FeatureGrid(g2)).tokens.data
    diff = np.abs(bumped - base).sum(axis=-1)
    assert diff[0, 0] > 0
    assert np.count_nonzero(diff) == 1


def test_encode_batch_matches_single():
    p = EncoderProfile("fine", 8, 4, 48, 9)
    samples = [generate_sample(s, "classify") for s in range(4)]
    grids = np.stack([s.grid.values for s in samples])
    batched = encode_batch(p, grids).data
    for i, s in enumerate(samples):
        single = encoder_forward(p, s.grid).tokens.data.reshape(32, 48)
        np.testing.assert_allclose(batched[i], single, rtol=1e-13)


def test_default_ensemble_token_budget():
    profiles = make_default_ensemble(0)
    assert [p.name for p in profiles] == ["fine", "general", "music", "speech"]
    assert sum(p.n_tokens for p in profiles) == 44
    assert profiles[0].n_tokens == 32 and profiles[0].dim == 48
    assert all(p.n_tokens == 4 and p.dim == 32 for p in profiles[1:])


def test_encoder_set_kinds():
    fine = make_encoder_set("fine", 0)
    assert len(fine) == 1 and fine[0].name == "fine"
    assert len(make_encoder_set("ensemble", 0)) == 4
    with pytest.raises(ValueError):
        make_encoder_set("huge", 0)


def test_encoders_frozen_and_seeded():
    a = make_default_ensemble(1)
    b = make_default_ensemble(1)
    c = make_default_ensemble(2)
    np.testing.assert_array_equal(a[0].projection.data, b[0].projection.data)
    assert not np.array_equal(a[0].projection.data, c[0].projection.data)
    assert not a[0].projection.requires_grad


def test_encoder_grid_must_divide_input():
    with pytest.raises(ValueError, match="divide"):
        EncoderProfile("bad", 5, 2, 8, 0)


# ---------------------------------------------------------------------------
# dataset dump/load

def test_dataset_roundtrip(tmp_path):
    samples = [generate_sample(derive_seed(0, "ds", i), task)
               for i, task in enumerate(("classify", "first_event", "count"))]
    path = tmp_path / "data.ndjson"
    dump_dataset(samples, path)
    loaded = load_dataset(path)
    assert len(loaded) == 3
    for orig, back in zip(samples, loaded):
        assert orig.tokens == back.tokens
        np.testing.assert_array_equal(orig.grid.values, back.grid.values)


def test_dataset_load_rejects_tampered_tokens(tmp_path):
    samples = [generate_sample(1, "classify")]
    path = tmp_path / "data.ndjson"
    dump_dataset(samples, path)
    text = path.read_text().replace('"task": "classify"', '"task": "count"')
    path.write_text(text)
    with pytest.raises(ValueError, match="line 1"):
        load_dataset(path)
