"""Structural invariant suite: gradient correctness, mask/causality
properties, FFN audio exclusion, fusion-mode equivalences, receptive-field
partitioning, parameter accounting, and freeze integrity.

Each check returns a CheckResult; the CLI turns failures into a nonzero
exit status. Several checks accept injection hooks so the test suite can
demonstrate that deliberately broken builds are caught.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .connector import (ConnectorConfig, build_receptive_map,
                        connector_param_count)
from .gradcheck import gradcheck
from .model import (AttentionOnly, Baseline, DelayedFusion, ForwardStats,
                    ModelConfig, PalModel, build_attention_mask, layout_for)
from .rng import SplitMix64, derive_seed
from .synth import (EncoderProfile, encode_batch, encoder_forward,
                    generate_sample, make_default_ensemble)
from .tensor import backward, tape
from .trainer import StageConfig, masked_next_token_loss, run_stage


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}" + \
            (f" — {self.detail}" if self.detail else "")


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} "
                     f"checks passed")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# miniature fixtures

MINI_MODEL = ModelConfig(d_model=8, n_layers=2, n_heads=2, ffn_hidden=16,
                         max_seq=64)
MINI_CONNECTOR = ConnectorConfig(latent_grid=(2, 1), latent_dim=8, llm_dim=8,
                                 n_heads=2)


def mini_profiles(seed: int = 7) -> list[EncoderProfile]:
    return [EncoderProfile("fine", 4, 2, 6, derive_seed(seed, "fine")),
            EncoderProfile("coarse", 2, 1, 4, derive_seed(seed, "coarse"))]


def mini_model(mode, seed: int = 11) -> tuple[PalModel, list[EncoderProfile]]:
    profiles = mini_profiles()
    return PalModel(MINI_MODEL, mode, MINI_CONNECTOR, profiles, seed), profiles


MINI_MODES = [
    ("baseline", Baseline()),
    ("delayed_k2", DelayedFusion(k=2)),
    ("attention_only_separate", AttentionOnly(start_layer=1, shared=False)),
    ("attention_only_shared", AttentionOnly(start_layer=1, shared=True)),
]

# Even smaller fixture for exhaustive finite differences: every parameter
# element costs two forward passes, so width matters a lot here.
GRADCHECK_MODEL = ModelConfig(d_model=4, n_layers=2, n_heads=2, ffn_hidden=8,
                              max_seq=64)
GRADCHECK_CONNECTOR = ConnectorConfig(latent_grid=(2, 1), latent_dim=4,
                                      llm_dim=4, n_heads=2)


def gradcheck_model(mode, seed: int = 11):
    profiles = mini_profiles()
    return PalModel(GRADCHECK_MODEL, mode, GRADCHECK_CONNECTOR, profiles,
                    seed), profiles


def _sample_inputs(model: PalModel, profiles, seed: int = 3):
    sample = generate_sample(seed, "classify")
    outputs = [encoder_forward(p, sample.grid) for p in profiles]
    return sample, outputs


# ---------------------------------------------------------------------------
# checks

def check_gradcheck_modes(tol: float = 1e-4) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for label, mode in MINI_MODES:
        model, profiles = gradcheck_model(mode)
        sample, outputs = _sample_inputs(model, profiles)
        tokens = np.asarray(sample.tokens)
        mask = np.asarray(sample.response_mask)

        def loss_fn():
            logits = model.forward(sample, outputs)
            return masked_next_token_loss(
                T.reshape(T.narrow(logits, 0, 0, len(tokens) - 1),
                          (1, len(tokens) - 1, model.cfg.vocab)),
                tokens[None, 1:], mask[None, 1:])

        report = gradcheck(loss_fn, model.named_parameters(), tol=tol)
        worst = max(worst, report.max_rel_err)
        if not report.passed:
            bad = report.failures()[0]
            return CheckResult("gradcheck_modes", False,
                               f"{label}: {bad.name} rel err {bad.max_rel_err:.2e}")
    dt = time.perf_counter() - t0
    return CheckResult("gradcheck_modes", True,
                       f"4 variants, max rel err {worst:.2e}, {dt:.1f}s")


def check_causality(n_samples: int = 50, mask_fn=None, seed: int = 0) -> CheckResult:
    """Perturbing any token after position p must leave logits at p unchanged."""
    kwargs = {"mask_fn": mask_fn} if mask_fn is not None else {}
    rng = SplitMix64(derive_seed(seed, "causality"))
    for label, mode in [("baseline", Baseline()),
                        ("attention_only", AttentionOnly(start_layer=1))]:
        model, profiles = mini_model(mode)
        for i in range(n_samples // 2):
            sample, outputs = _sample_inputs(model, profiles,
                                             derive_seed(seed, label, i))
            base = model.forward(sample, outputs, **kwargs).data
            toks = list(sample.tokens)
            p = 1 + rng.randint(len(toks) - 2)  # perturb somewhere after pos 0
            toks_mut = list(toks)
            toks_mut[p] = (toks_mut[p] + 1 + rng.randint(62)) % 64
            mutated = type(sample)(sample.grid, sample.events,
                                   toks_mut[:len(sample.prompt_tokens)],
                                   toks_mut[len(sample.prompt_tokens):],
                                   sample.response_mask, sample.task_kind,
                                   sample.seed, sample.difficulty)
            new = model.forward(mutated, outputs, **kwargs).data
            if not np.array_equal(base[:p], new[:p]):
                return CheckResult(
                    "mask_causality", False,
                    f"{label}: logits before position {p} changed after "
                    f"perturbing position {p}")
    return CheckResult("mask_causality", True, f"{n_samples} perturbations clean")


def check_audio_visibility(n_samples: int = 50, mask_fn=None,
                           seed: int = 1) -> CheckResult:
    """Perturbing encoder outputs may change logits only at positions allowed
    to attend to audio (user/response spans); the system prompt stays blind."""
    kwargs = {"mask_fn": mask_fn} if mask_fn is not None else {}
    for label, mode in [("baseline", Baseline()),
                        ("delayed_k2", DelayedFusion(k=2)),
                        ("attention_only", AttentionOnly(start_layer=1))]:
        model, profiles = mini_model(mode)
        for i in range(max(n_samples // 3, 1)):
            sample, outputs = _sample_inputs(model, profiles,
                                             derive_seed(seed, label, i))
            base = model.forward(sample, outputs, **kwargs).data
            bumped = [type(o)(T.Tensor(o.tokens.data + 0.5), o.profile)
                      for o in outputs]
            new = model.forward(sample, bumped, **kwargs).data
            s = 2  # system span length
            if not np.array_equal(base[:s], new[:s]):
                return CheckResult("audio_visibility", False,
                                   f"{label}: system-prompt logits changed "
                                   f"when audio changed")
            if np.array_equal(base[s:], new[s:]):
                return CheckResult("audio_visibility", False,
                                   f"{label}: audio perturbation had no "
                                   f"effect anywhere (wiring dead)")
    return CheckResult("audio_visibility", True,
                       "system blind, user/response sighted, 3 modes")


def check_ffn_exclusion(steps: int = 5, sabotage: bool = False) -> CheckResult:
    """Attention-only training must never route an audio row into any FFN."""
    model, profiles = mini_model(AttentionOnly(start_layer=1))
    stats = ForwardStats()
    if sabotage:
        sample, outputs = _sample_inputs(model, profiles)
        model.forward(sample, outputs, stats=stats,
                      debug_route_audio_to_ffn=True)
    else:
        stage = StageConfig(1, steps, batch_size=4, peak_lr=1e-3,
                            warmup_ratio=0.05, task_mix=("classify",))
        run_stage(stage, model, profiles, master_seed=5, eval_n=8, stats=stats)
    if stats.ffn_audio_rows != 0:
        return CheckResult("ffn_audio_exclusion", False,
                           f"{stats.ffn_audio_rows} audio rows entered FFNs")
    return CheckResult("ffn_audio_exclusion", True,
                       f"0 audio rows across {steps} training steps")


def check_delayed_prefix(seed: int = 21) -> CheckResult:
    """Layers below k are bit-identical to the text-only run; layer k diverges."""
    k = 2
    model, profiles = mini_model(DelayedFusion(k=k), seed=seed)
    sample, outputs = _sample_inputs(model, profiles)
    fused: list = []
    model.forward(sample, outputs, capture_hidden=fused)
    text_only: list = []
    model.forward(sample, None, capture_hidden=text_only)
    for (layer, h_f), (_, h_t) in zip(fused, text_only):
        if layer < k and not np.array_equal(h_f, h_t):
            return CheckResult("delayed_prefix_equivalence", False,
                               f"layer {layer} differs from text-only run")
        if layer >= k and np.array_equal(h_f, h_t):
            return CheckResult("delayed_prefix_equivalence", False,
                               f"layer {layer} did not diverge after injection")
    return CheckResult("delayed_prefix_equivalence", True,
                       f"layers < {k} bit-identical, divergence at layer {k}")


def check_delayed_k1_equals_baseline(seed: int = 22,
                                     tol: float = 1e-12) -> CheckResult:
    m_base, profiles = mini_model(Baseline(), seed=seed)
    m_k1, _ = mini_model(DelayedFusion(k=1), seed=seed)
    sample, outputs = _sample_inputs(m_base, profiles)
    diff = float(np.abs(m_base.forward(sample, outputs).data
                        - m_k1.forward(sample, outputs).data).max())
    ok = diff <= tol
    return CheckResult("delayed_k1_equals_baseline", ok,
                       f"max |Δlogits| = {diff:.2e}")


def check_mode_reduction(seed: int = 23) -> CheckResult:
    """With no audio, every fusion mode equals the plain text decoder."""
    sample = generate_sample(3, "classify")
    ref = None
    for label, mode in MINI_MODES:
        model, _ = mini_model(mode, seed=seed)
        logits = model.forward(sample, None).data
        if ref is None:
            ref = logits
        elif not np.array_equal(ref, logits):
            return CheckResult("mode_reduction", False,
                               f"{label} differs from text-only decoder")
    return CheckResult("mode_reduction", True, "all modes collapse exactly")


def check_receptive_partition() -> CheckResult:
    """Brute-force partition and time-ordering check for the canonical
    encoder/latent geometries."""
    cfg = ConnectorConfig()
    profiles = make_default_ensemble(0)
    rmap = build_receptive_map(profiles, cfg)
    tp, fp = cfg.latent_grid
    for p in profiles:
        cells = rmap.assignments[p.name]
        seen = [c for cell in cells for c in cell]
        if len(seen) != p.n_tokens or len(set(seen)) != p.n_tokens:
            return CheckResult("receptive_partition", False,
                               f"{p.name}: assignment is not a partition")
        # order preservation within each frequency row of latents
        for fi in range(fp):
            prev_max = -1.0
            for ti in range(tp):
                coords = cells[ti * fp + fi]
                if not coords:
                    continue
                times = [(t + 0.5) / p.grid_t for t, _ in coords]
                if min(times) <= prev_max:
                    return CheckResult(
                        "receptive_partition", False,
                        f"{p.name}: latent row {fi} violates time ordering "
                        f"at latent t'={ti}")
                prev_max = max(times)
    return CheckResult("receptive_partition", True,
                       f"{len(profiles)} encoder geometries partition cleanly")


def check_param_accounting() -> CheckResult:
    profiles = make_default_ensemble(0)
    n_layers = 4
    for shared in (False, True):
        cfg = ConnectorConfig(shared=shared)
        from .connector import ConnectorBank
        bank = ConnectorBank(cfg, profiles, list(range(5, 5 + n_layers)), seed=9)
        formula = connector_param_count(cfg, profiles, n_layers)
        walk = bank.param_count()
        if formula != walk:
            return CheckResult("param_accounting", False,
                               f"shared={shared}: formula {formula} != walk {walk}")
    sep = connector_param_count(ConnectorConfig(shared=False), profiles, n_layers)
    shr = connector_param_count(ConnectorConfig(shared=True), profiles, n_layers)
    ld = ConnectorConfig().latent_dim
    xattn_plus_seed = ld + ld * ld + sum(2 * p.dim * ld for p in profiles)
    if not (shr < sep and sep - shr == (n_layers - 1) * xattn_plus_seed):
        return CheckResult("param_accounting", False,
                           f"shared {shr} vs separate {sep} gap wrong")
    return CheckResult("param_accounting", True,
                       f"separate {sep}, shared {shr}, gap "
                       f"{(n_layers - 1) * xattn_plus_seed}")


def check_freeze_integrity(steps: int = 4) -> CheckResult:
    model, profiles = mini_model(AttentionOnly(start_layer=1))
    before_tf = {k: v.data.copy() for k, v in model.transformer_parameters().items()}
    before_enc = [p.projection.data.copy() for p in profiles]
    stage = StageConfig(1, steps, batch_size=4, peak_lr=1e-3, warmup_ratio=0.05,
                        task_mix=("classify",))
    run_stage(stage, model, profiles, master_seed=6, eval_n=8)
    for k, v in model.transformer_parameters().items():
        if not np.array_equal(before_tf[k], v.data):
            return CheckResult("freeze_integrity", False,
                               f"stage 1 modified transformer param {k}")
    for p, before in zip(profiles, before_enc):
        if not np.array_equal(before, p.projection.data):
            return CheckResult("freeze_integrity", False,
                               f"encoder {p.name} projection changed")
        if p.projection.grad is not None:
            return CheckResult("freeze_integrity", False,
                               f"encoder {p.name} projection received gradient")
    return CheckResult("freeze_integrity", True,
                       "transformer and encoders untouched by stage 1")


def check_shared_aliasing(steps: int = 2) -> CheckResult:
    """After an optimizer step, shared cross-attention weights seen from any
    two injection layers are the same objects."""
    model, profiles = mini_model(AttentionOnly(start_layer=1, shared=True))
    stage = StageConfig(1, steps, batch_size=4, peak_lr=1e-3, warmup_ratio=0.05,
                        task_mix=("classify",))
    run_stage(stage, model, profiles, master_seed=8, eval_n=8)
    layers = model.connectors.injection_layers
    first = model.connectors.per_layer[layers[0]]
    for layer in layers[1:]:
        p = model.connectors.per_layer[layer]
        same = (p.seed is first.seed and p.wq is first.wq
                and all(p.wk[n] is first.wk[n] for n in p.wk)
                and all(p.wv[n] is first.wv[n] for n in p.wv)
                and p.proj is not first.proj)
        if not same:
            return CheckResult("shared_aliasing", False,
                               f"layer {layer} does not alias the shared module")
    return CheckResult("shared_aliasing", True,
                       f"{len(layers)} layers alias one cross-attention module")


ALL_CHECKS = [
    check_gradcheck_modes,
    check_causality,
    check_audio_visibility,
    check_ffn_exclusion,
    check_delayed_prefix,
    check_delayed_k1_equals_baseline,
    check_mode_reduction,
    check_receptive_partition,
    check_param_accounting,
    check_freeze_integrity,
    check_shared_aliasing,
]


def run_all() -> VerifyReport:
    report = VerifyReport()
    for check in ALL_CHECKS:
        report.checks.append(check())
    return report
