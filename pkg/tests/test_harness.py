import json

import numpy as np
import pytest
from click.testing import CliRunner

from pal.checkpoint import (CheckpointError, config_fingerprint,
                            load_checkpoint, restore_into, save_checkpoint)
from pal.cli import main as cli_main
from pal.config import (CANONICAL_NAMES, ConfigError, canonical_config,
                        config_from_dict, config_to_dict, load_config,
                        save_config, serialize_config)
from pal.harness import (ablate, build_model, recompute_stage_accuracy,
                         render_table, run_experiment)
from pal.model import AttentionOnly, Baseline, DelayedFusion

TINY_MODEL = {"d_model": 8, "n_layers": 2, "n_heads": 2, "ffn_hidden": 16}


def tiny_config(name, seed=0, out_dir="runs", **over):
    raw = {"name": name, "seed": seed, "model": dict(TINY_MODEL),
           "fusion": {"mode": "attention_only", "start_layer": 1},
           "stage_steps": [3, 2, 2], "out_dir": out_dir}
    raw.update(over)
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# config schema

def test_minimal_config_fills_defaults():
    cfg = config_from_dict({"name": "x", "seed": 1})
    assert cfg.fusion == AttentionOnly(start_layer=5, shared=False)
    assert cfg.encoders == "ensemble"
    assert cfg.connector.latent_grid == (4, 2)
    assert cfg.stage_steps == (2000, 2000, 3000)
    assert cfg.model.n_layers == 8


def test_k_zero_rejected_with_exact_message():
    raw = {"name": "x", "seed": 0, "fusion": {"mode": "delayed", "k": 0}}
    with pytest.raises(ConfigError, match=r"^k must be in \[1, n_layers\]$"):
        config_from_dict(raw)


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ConfigError, match="unknown key.*config.*typo"):
        config_from_dict({"name": "x", "seed": 0, "typo": 1})
    with pytest.raises(ConfigError, match="unknown key.*model"):
        config_from_dict({"name": "x", "seed": 0, "model": {"layers": 8}})
    with pytest.raises(ConfigError, match="unknown key.*fusion"):
        config_from_dict({"name": "x", "seed": 0, "fusion": {"mode": "baseline",
                                                             "delay": 3}})


def test_required_fields_and_types():
    with pytest.raises(ConfigError, match="name"):
        config_from_dict({"seed": 0})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"name": "x"})
    with pytest.raises(ConfigError, match="seed must be of type int"):
        config_from_dict({"name": "x", "seed": "zero"})
    with pytest.raises(ConfigError, match="fusion.mode"):
        config_from_dict({"name": "x", "seed": 0,
                          "fusion": {"mode": "telepathy"}})
    with pytest.raises(ConfigError, match="stage_steps"):
        config_from_dict({"name": "x", "seed": 0, "stage_steps": [1, 2]})
    with pytest.raises(ConfigError, match="encoders"):
        config_from_dict({"name": "x", "seed": 0, "encoders": "massive"})


def test_config_roundtrip(tmp_path):
    cfg = canonical_config("full_pal", seed=3)
    path = tmp_path / "c.json"
    save_config(cfg, path)
    again = load_config(path)
    assert config_to_dict(again) == config_to_dict(cfg)
    assert serialize_config(again) == serialize_config(cfg)


def test_load_config_reports_json_position(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"name": "x",\n  "seed": }\n')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(path)


def test_canonical_grid_design_elements():
    want = {
        "baseline": (1, 0, 0, 0),
        "delayed_fusion": (0, 1, 0, 0),
        "attention_only": (0, 1, 1, 0),
        "full_pal": (0, 1, 1, 1),
    }
    for name, marks in want.items():
        el = canonical_config(name).design_elements()
        got = (el["baseline"], el["delayed_fusion"], el["attention_only"],
               el["multi_encoder"])
        assert got == tuple(map(bool, marks)), name
    assert canonical_config("pal_shared").fusion.shared
    assert canonical_config("pal_shared").connector.shared
    assert not canonical_config("pal_separate").fusion.shared
    with pytest.raises(ConfigError, match="unknown canonical"):
        canonical_config("kitchen_sink")


def test_canonical_fusion_modes():
    assert canonical_config("baseline").fusion == Baseline()
    assert canonical_config("delayed_fusion").fusion == DelayedFusion(k=5)
    assert canonical_config("attention_only").fusion == \
        AttentionOnly(start_layer=5)
    assert canonical_config("baseline").encoders == "fine"
    assert canonical_config("full_pal").encoders == "ensemble"


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_identical_forward(tmp_path):
    cfg = tiny_config("ck")
    model, profiles = build_model(cfg)
    from pal.synth import encoder_forward, generate_sample
    s = generate_sample(0)
    outs = [encoder_forward(p, s.grid) for p in profiles]
    want = model.forward(s, outs).data.copy()

    path = tmp_path / "m.ckpt"
    save_checkpoint(model.named_parameters(), cfg, path)
    for t in model.named_parameters().values():
        t.data += 1.0  # scramble
    restore_into(model.named_parameters(), load_checkpoint(path, cfg))
    np.testing.assert_array_equal(model.forward(s, outs).data, want)


def test_checkpoint_fingerprint_guards_architecture(tmp_path):
    cfg = tiny_config("ck")
    model, _ = build_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.named_parameters(), cfg, path)
    other = tiny_config("ck", model={**TINY_MODEL, "d_model": 16})
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path, other)
    # name/seed/steps changes must not change the fingerprint
    renamed = tiny_config("other", seed=9, stage_steps=[1, 1, 1])
    assert config_fingerprint(renamed) == config_fingerprint(cfg)
    load_checkpoint(path, renamed)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    cfg = tiny_config("ck")
    model, _ = build_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.named_parameters(), cfg, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTCKPT1" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad, cfg)

    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(cut, cfg)


def test_restore_into_rejects_mismatched_sets(tmp_path):
    cfg = tiny_config("ck")
    model, _ = build_model(cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.named_parameters(), cfg, path)
    arrays = load_checkpoint(path, cfg)
    arrays.pop("emb")
    arrays["bogus"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="missing.*emb"):
        restore_into(model.named_parameters(), arrays)


# ---------------------------------------------------------------------------
# experiment runner

def test_run_experiment_outputs(tmp_path):
    cfg = tiny_config("tiny", out_dir=str(tmp_path / "runs"))
    rows = run_experiment(cfg, eval_n=4)
    assert [r["stage"] for r in rows] == [1, 2, 3]
    out = tmp_path / "runs" / "tiny"
    for fname in ("config.json", "metrics.csv", "report.csv", "stage1.ckpt",
                  "stage2.ckpt", "stage3.ckpt", "loss_curve.png",
                  "accuracy.png"):
        assert (out / fname).exists(), fname
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "step,stage,lr,loss"
    assert len(metrics) == 1 + 3 + 2 + 2
    assert rows[0]["acc_count"] is None  # stage 1 has no count task
    assert rows[2]["acc_count"] is not None


def test_metrics_csv_byte_identical_across_runs(tmp_path):
    a = tiny_config("det", out_dir=str(tmp_path / "a"))
    b = tiny_config("det", out_dir=str(tmp_path / "b"))
    run_experiment(a, eval_n=2)
    run_experiment(b, eval_n=2)
    ma = (tmp_path / "a" / "det" / "metrics.csv").read_bytes()
    mb = (tmp_path / "b" / "det" / "metrics.csv").read_bytes()
    assert ma == mb


def test_report_accuracy_recomputable_from_checkpoint(tmp_path):
    cfg = tiny_config("spot", out_dir=str(tmp_path / "runs"))
    rows = run_experiment(cfg, eval_n=6)
    acc = recompute_stage_accuracy(tmp_path / "runs" / "spot", 3, eval_n=6)
    row = rows[2]
    for task, val in acc.items():
        assert row[f"acc_{task}"] == val


def test_render_table_groups_and_flags(tmp_path):
    cfg = tiny_config("solo", out_dir=str(tmp_path / "runs"))
    rows = run_experiment(cfg, eval_n=2)
    text = render_table(rows)
    assert "== stage 1 ==" in text and "== stage 3 ==" in text
    # single config: its row is best in every group, so stars appear
    assert text.count("*") >= 6


def test_ablate_rejects_duplicate_names(tmp_path):
    d = tmp_path / "cfgs"
    d.mkdir()
    save_config(tiny_config("same"), d / "a.json")
    save_config(tiny_config("same"), d / "b.json")
    with pytest.raises(ConfigError, match="duplicate.*same"):
        ablate(d, tmp_path / "out.csv")


def test_ablate_emits_table_files(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    d = tmp_path / "cfgs"
    d.mkdir()
    save_config(tiny_config("one", out_dir=str(tmp_path / "runs")), d / "one.json")
    save_config(tiny_config("two", seed=1, out_dir=str(tmp_path / "runs"),
                            fusion={"mode": "baseline"}), d / "two.json")
    rows = ablate(d, tmp_path / "tables" / "grid.csv", eval_n=2)
    assert len(rows) == 6
    assert (tmp_path / "tables" / "grid.csv").exists()
    assert (tmp_path / "tables" / "grid.txt").exists()
    assert (tmp_path / "tables" / "grid.png").exists()
    header = (tmp_path / "tables" / "grid.csv").read_text().splitlines()[0]
    assert header.startswith("config,stage,baseline,delayed_fusion,"
                             "attention_only,multi_encoder")


def test_ablate_requires_configs(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    with pytest.raises(ConfigError, match="no .*configs"):
        ablate(d, tmp_path / "out.csv")


# ---------------------------------------------------------------------------
# verify negative controls

def test_corrupted_mask_caught_by_causality_suite():
    from pal.model import build_attention_mask
    from pal.verify import check_audio_visibility, check_causality

    def audio_leaks_to_system(layout, mode, layer, n_layers=8):
        m = build_attention_mask(layout, mode, layer, n_layers).copy()
        if m.shape[1] > layout.text_len:
            m[:layout.sys_len, layout.text_len:] = True
        return m

    result = check_audio_visibility(mask_fn=audio_leaks_to_system)
    assert not result.passed
    assert "system" in result.detail

    def future_leak(layout, mode, layer, n_layers=8):
        m = build_attention_mask(layout, mode, layer, n_layers).copy()
        m[0, min(4, m.shape[1] - 1)] = True  # position 0 peeks ahead
        return m

    assert not check_causality(mask_fn=future_leak).passed


def test_audio_routed_to_ffn_caught_by_exclusion_check():
    from pal.verify import check_ffn_exclusion

    result = check_ffn_exclusion(sabotage=True)
    assert not result.passed
    assert "audio rows" in result.detail


# ---------------------------------------------------------------------------
# CLI

def test_cli_dump_config_stdout_is_loadable():
    runner = CliRunner()
    res = runner.invoke(cli_main, ["dump-config", "--canonical", "full_pal"])
    assert res.exit_code == 0
    cfg = config_from_dict(json.loads(res.output))
    assert cfg.name == "full_pal"


def test_cli_dump_config_all_writes_six_files(tmp_path):
    runner = CliRunner()
    res = runner.invoke(cli_main, ["dump-config", "--canonical", "all",
                                   "--out", str(tmp_path / "cfgs")])
    assert res.exit_code == 0
    files = sorted(p.stem for p in (tmp_path / "cfgs").glob("*.json"))
    assert files == sorted(CANONICAL_NAMES)


def test_cli_run_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "seed": 0,
                               "fusion": {"mode": "delayed", "k": 0}}))
    res = CliRunner().invoke(cli_main, ["run", "--config", str(bad)])
    assert res.exit_code == 2
    assert "k must be in [1, n_layers]" in res.output


def test_cli_run_tiny_config(tmp_path):
    cfg = tiny_config("cli", out_dir=str(tmp_path / "runs"))
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    res = CliRunner().invoke(cli_main, ["run", "--config", str(path),
                                        "--eval-n", "2"])
    assert res.exit_code == 0, res.output
    assert "== stage 3 ==" in res.output
    assert (tmp_path / "runs" / "cli" / "report.csv").exists()


def test_cli_gradcheck_command():
    # Uses the miniature models, so this stays fast enough for unit tests.
    res = CliRunner().invoke(cli_main, ["gradcheck"])
    assert res.exit_code == 0, res.output
    assert "[PASS] gradcheck_modes" in res.output
