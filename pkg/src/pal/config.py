"""Strict JSON experiment configs and the canonical ablation grid."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .connector import ConnectorConfig
from .model import AttentionOnly, Baseline, DelayedFusion, FusionMode, ModelConfig
from .trainer import TASK_MIX_BY_STAGE, StageConfig

CANONICAL_GRID = ("baseline", "delayed_fusion", "attention_only", "full_pal")
CANONICAL_CONNECTOR = ("pal_separate", "pal_shared")
CANONICAL_NAMES = CANONICAL_GRID + CANONICAL_CONNECTOR

_DEFAULT_STEPS = (2000, 2000, 3000)
_STAGE_LR = {1: 1e-3, 2: 1e-4, 3: 1e-4}
_STAGE_WARMUP = {1: 0.05, 2: 0.03, 3: 0.03}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    model: ModelConfig = ModelConfig()
    fusion: FusionMode = field(default_factory=AttentionOnly)
    encoders: str = "ensemble"           # "fine" or "ensemble"
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    stage_steps: tuple[int, int, int] = _DEFAULT_STEPS
    out_dir: str = "runs"

    def stages(self) -> list[StageConfig]:
        return [StageConfig(i, self.stage_steps[i - 1], peak_lr=_STAGE_LR[i],
                            warmup_ratio=_STAGE_WARMUP[i],
                            task_mix=TASK_MIX_BY_STAGE[i])
                for i in (1, 2, 3)]

    def design_elements(self) -> dict[str, bool]:
        """Checkmark columns of the ablation grid."""
        delayed = (isinstance(self.fusion, DelayedFusion) and self.fusion.k > 1) or \
                  (isinstance(self.fusion, AttentionOnly) and
                   self.fusion.start_layer > 1)
        return {
            "baseline": isinstance(self.fusion, Baseline),
            "delayed_fusion": delayed,
            "attention_only": isinstance(self.fusion, AttentionOnly),
            "multi_encoder": self.encoders == "ensemble",
        }


# ---------------------------------------------------------------------------
# (de)serialization

def config_to_dict(cfg: ExperimentConfig) -> dict:
    fusion: dict = {}
    if isinstance(cfg.fusion, Baseline):
        fusion = {"mode": "baseline"}
    elif isinstance(cfg.fusion, DelayedFusion):
        fusion = {"mode": "delayed", "k": cfg.fusion.k}
    else:
        fusion = {"mode": "attention_only", "start_layer": cfg.fusion.start_layer,
                  "shared": cfg.fusion.shared}
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "model": asdict(cfg.model),
        "fusion": fusion,
        "encoders": cfg.encoders,
        "connector": {
            "latent_grid": list(cfg.connector.latent_grid),
            "latent_dim": cfg.connector.latent_dim,
            "n_heads": cfg.connector.n_heads,
        },
        "stage_steps": list(cfg.stage_steps),
        "out_dir": cfg.out_dir,
    }


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def _expect_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _get(d: dict, key: str, typ, default, where: str):
    if key not in d:
        return default
    v = d[key]
    if typ is float and isinstance(v, int):
        v = float(v)
    if not isinstance(v, typ) or isinstance(v, bool) and typ is int:
        raise ConfigError(f"{where}.{key} must be of type {typ.__name__}")
    return v


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _expect_keys(raw, {"name", "seed", "model", "fusion", "encoders",
                       "connector", "stage_steps", "out_dir"}, "config")
    for req in ("name", "seed"):
        if req not in raw:
            raise ConfigError(f"missing required field {req!r}")
    name = _get(raw, "name", str, None, "config")
    seed = _get(raw, "seed", int, None, "config")

    md = raw.get("model", {})
    _expect_keys(md, {"vocab", "d_model", "n_layers", "n_heads", "ffn_hidden",
                      "max_seq"}, "model")
    defaults = ModelConfig()
    try:
        model = ModelConfig(
            vocab=_get(md, "vocab", int, defaults.vocab, "model"),
            d_model=_get(md, "d_model", int, defaults.d_model, "model"),
            n_layers=_get(md, "n_layers", int, defaults.n_layers, "model"),
            n_heads=_get(md, "n_heads", int, defaults.n_heads, "model"),
            ffn_hidden=_get(md, "ffn_hidden", int, defaults.ffn_hidden, "model"),
            max_seq=_get(md, "max_seq", int, defaults.max_seq, "model"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    fd = raw.get("fusion", {})
    _expect_keys(fd, {"mode", "k", "start_layer", "shared"}, "fusion")
    mode_name = _get(fd, "mode", str, "attention_only", "fusion")
    k = _get(fd, "k", int, 5, "fusion")
    start = _get(fd, "start_layer", int, 5, "fusion")
    shared = _get(fd, "shared", bool, False, "fusion")
    if mode_name == "baseline":
        fusion: FusionMode = Baseline()
    elif mode_name == "delayed":
        fusion = DelayedFusion(k=k)
    elif mode_name == "attention_only":
        fusion = AttentionOnly(start_layer=start, shared=shared)
    else:
        raise ConfigError(f"fusion.mode must be one of baseline, delayed, "
                          f"attention_only; got {mode_name!r}")
    if isinstance(fusion, DelayedFusion) and not 1 <= fusion.k <= model.n_layers:
        raise ConfigError("k must be in [1, n_layers]")
    if isinstance(fusion, AttentionOnly) and \
            not 1 <= fusion.start_layer <= model.n_layers:
        raise ConfigError("start_layer must be in [1, n_layers]")

    encoders = _get(raw, "encoders", str, "ensemble", "config")
    if encoders not in ("fine", "ensemble"):
        raise ConfigError(f"encoders must be 'fine' or 'ensemble', got {encoders!r}")

    cd = raw.get("connector", {})
    _expect_keys(cd, {"latent_grid", "latent_dim", "n_heads"}, "connector")
    grid = cd.get("latent_grid", [4, 2])
    if (not isinstance(grid, list) or len(grid) != 2
            or not all(isinstance(g, int) and g > 0 for g in grid)):
        raise ConfigError("connector.latent_grid must be [T', F'] positive ints")
    try:
        connector = ConnectorConfig(
            latent_grid=(grid[0], grid[1]),
            latent_dim=_get(cd, "latent_dim", int, 32, "connector"),
            llm_dim=model.d_model,
            n_heads=_get(cd, "n_heads", int, 2, "connector"),
            shared=shared,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    steps = raw.get("stage_steps", list(_DEFAULT_STEPS))
    if (not isinstance(steps, list) or len(steps) != 3
            or not all(isinstance(s, int) and s > 0 for s in steps)):
        raise ConfigError("stage_steps must be three positive integers")

    out_dir = _get(raw, "out_dir", str, "runs", "config")
    return ExperimentConfig(name=name, seed=seed, model=model, fusion=fusion,
                            encoders=encoders, connector=connector,
                            stage_steps=(steps[0], steps[1], steps[2]),
                            out_dir=out_dir)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))


# ---------------------------------------------------------------------------
# canonical configs (ablation grid plus connector-sharing pair)

def canonical_config(name: str, seed: int = 0,
                     stage_steps: tuple[int, int, int] = _DEFAULT_STEPS,
                     out_dir: str = "runs") -> ExperimentConfig:
    base = ExperimentConfig(name=name, seed=seed, stage_steps=stage_steps,
                            out_dir=out_dir)
    if name == "baseline":
        return replace(base, fusion=Baseline(), encoders="fine")
    if name == "delayed_fusion":
        return replace(base, fusion=DelayedFusion(k=5), encoders="fine")
    if name == "attention_only":
        return replace(base, fusion=AttentionOnly(start_layer=5), encoders="fine")
    if name == "full_pal":
        return replace(base, fusion=AttentionOnly(start_layer=5),
                       encoders="ensemble")
    if name == "pal_separate":
        return replace(base, fusion=AttentionOnly(start_layer=5, shared=False),
                       encoders="ensemble")
    if name == "pal_shared":
        return replace(base, fusion=AttentionOnly(start_layer=5, shared=True),
                       encoders="ensemble",
                       connector=replace(base.connector, shared=True))
    raise ConfigError(f"unknown canonical config {name!r}; "
                      f"choose from {', '.join(CANONICAL_NAMES)}")
