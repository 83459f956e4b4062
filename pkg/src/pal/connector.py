"""Latent-token connector: a single learned latent replicated into a small
time-frequency grid of query tokens, each cross-attending to its own region
of every encoder's output grid, then projected into the LLM hidden space.

Receptive fields are disjoint per encoder and order-preserving in
normalized time-frequency coordinates. A latent whose pooled region is
empty passes its seed straight through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import SplitMix64, derive_seed
from .synth import EncoderOutput, EncoderProfile
from .tensor import Tensor

_MASKED = -1e30


@dataclass(frozen=True)
class ConnectorConfig:
    latent_grid: tuple[int, int] = (4, 2)   # (T', F')
    latent_dim: int = 32
    llm_dim: int = 64
    n_heads: int = 2
    shared: bool = False

    def __post_init__(self):
        if self.latent_dim % self.n_heads:
            raise ValueError(
                f"latent_dim {self.latent_dim} not divisible by {self.n_heads} heads")

    @property
    def n_latents(self) -> int:
        return self.latent_grid[0] * self.latent_grid[1]

    @property
    def head_dim(self) -> int:
        return self.latent_dim // self.n_heads


def _cell(center: float, n_cells: int) -> int:
    """Cell index containing a normalized coordinate; boundary ties go low."""
    v = center * n_cells
    c = int(math.floor(v))
    if v == c and c > 0:
        c -= 1
    return min(c, n_cells - 1)


@dataclass
class ReceptiveFieldMap:
    """Per-encoder assignment of latent index -> encoder (t, f) coordinates."""

    profile_keys: list[tuple]                     # (name, grid_t, grid_f, dim)
    assignments: dict[str, list[list[tuple[int, int]]]]

    def flat_mask(self, cfg: ConnectorConfig) -> np.ndarray:
        """(n_latents, total_tokens) boolean mask over pooled encoder tokens,
        pooled in profile order with per-profile flat index t * grid_f + f."""
        cols = []
        for name, gt, gf, _dim in self.profile_keys:
            m = np.zeros((cfg.n_latents, gt * gf), dtype=bool)
            for li, coords in enumerate(self.assignments[name]):
                for (t, f) in coords:
                    m[li, t * gf + f] = True
            cols.append(m)
        return np.concatenate(cols, axis=1)


def _profile_key(p: EncoderProfile) -> tuple:
    return (p.name, p.grid_t, p.grid_f, p.dim)


def build_receptive_map(profiles: list[EncoderProfile],
                        cfg: ConnectorConfig) -> ReceptiveFieldMap:
    tp, fp = cfg.latent_grid
    assignments = {}
    for p in profiles:
        cells: list[list[tuple[int, int]]] = [[] for _ in range(cfg.n_latents)]
        for t in range(p.grid_t):
            for f in range(p.grid_f):
                ti = _cell((t + 0.5) / p.grid_t, tp)
                fi = _cell((f + 0.5) / p.grid_f, fp)
                cells[ti * fp + fi].append((t, f))
        assignments[p.name] = cells
    return ReceptiveFieldMap([_profile_key(p) for p in profiles], assignments)


@dataclass
class ConnectorParams:
    seed: Tensor
    wq: Tensor
    wk: dict[str, Tensor]
    wv: dict[str, Tensor]
    proj: Tensor
    proj_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.seed": self.seed, f"{prefix}.wq": self.wq,
               f"{prefix}.proj": self.proj, f"{prefix}.proj_b": self.proj_b}
        for name, w in self.wk.items():
            out[f"{prefix}.wk.{name}"] = w
        for name, w in self.wv.items():
            out[f"{prefix}.wv.{name}"] = w
        return out


def init_connector_params(cfg: ConnectorConfig, profiles: list[EncoderProfile],
                          seed: int) -> ConnectorParams:
    rng = SplitMix64(seed)
    ld = cfg.latent_dim

    def gauss(shape, std):
        return Tensor(rng.fill_gauss(shape, std=std), requires_grad=True)

    wk = {p.name: gauss((p.dim, ld), 1.0 / math.sqrt(p.dim)) for p in profiles}
    wv = {p.name: gauss((p.dim, ld), 1.0 / math.sqrt(p.dim)) for p in profiles}
    return ConnectorParams(
        seed=gauss((ld,), 1.0),
        wq=gauss((ld, ld), 1.0 / math.sqrt(ld)),
        wk=wk, wv=wv,
        proj=gauss((ld, cfg.llm_dim), 1.0 / math.sqrt(ld)),
        proj_b=Tensor(np.zeros(cfg.llm_dim), requires_grad=True),
    )


def _check_profiles(rmap: ReceptiveFieldMap, keys: list[tuple]) -> None:
    if keys != rmap.profile_keys:
        raise ValueError(f"receptive map was built for {rmap.profile_keys}, "
                         f"got encoder outputs for {keys}")


def connector_forward_batch(params: ConnectorParams,
                            feats: dict[str, Tensor],
                            rmap: ReceptiveFieldMap,
                            cfg: ConnectorConfig) -> Tensor:
    """Batched connector: per-encoder token features (B, S_e, dim_e) ->
    latent outputs (B, n_latents, llm_dim)."""
    n, h, hd, ld = cfg.n_latents, cfg.n_heads, cfg.head_dim, cfg.latent_dim

    ks, vs = [], []
    for name, _gt, _gf, _dim in rmap.profile_keys:
        x = feats[name]
        ks.append(T.matmul(x, params.wk[name]))
        vs.append(T.matmul(x, params.wv[name]))
    k = T.concat(ks, axis=1)  # (B, S, ld)
    v = T.concat(vs, axis=1)
    b, s = k.shape[0], k.shape[1]

    q = T.matmul(T.reshape(params.seed, (1, ld)), params.wq)       # (1, ld)
    q = T.transpose(T.reshape(q, (1, h, hd)), (1, 0, 2))           # (h, 1, hd)

    kt = T.transpose(T.reshape(k, (b, s, h, hd)), (0, 2, 3, 1))    # (B, h, hd, S)
    vt = T.transpose(T.reshape(v, (b, s, h, hd)), (0, 2, 1, 3))    # (B, h, S, hd)

    mask = rmap.flat_mask(cfg)                                     # (n, S)
    bias = np.where(mask, 0.0, _MASKED)[None, None]                # (1, 1, n, S)
    nonempty = mask.any(axis=1).astype(np.float64)                 # (n,)

    scores = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(hd))         # (B, h, 1, S)
    weights = T.softmax(T.add(scores, T.const(bias)), axis=-1)     # (B, h, n, S)
    attended = T.matmul(weights, vt)                               # (B, h, n, hd)
    attended = T.reshape(T.transpose(attended, (0, 2, 1, 3)), (b, n, ld))
    # Latents with an empty pooled region receive no attended contribution.
    attended = T.mul(attended, T.const(nonempty[None, :, None]))

    latents = T.add(attended, T.reshape(params.seed, (1, 1, ld)))
    return T.add(T.matmul(latents, params.proj), params.proj_b)


def connector_forward(params: ConnectorParams, outputs: list[EncoderOutput],
                      rmap: ReceptiveFieldMap,
                      cfg: ConnectorConfig) -> Tensor:
    """Single-sample connector forward: (n_latents, llm_dim)."""
    _check_profiles(rmap, [_profile_key(o.profile) for o in outputs])
    feats = {o.profile.name: T.reshape(o.tokens,
                                       (1, o.profile.n_tokens, o.profile.dim))
             for o in outputs}
    out = connector_forward_batch(params, feats, rmap, cfg)
    return T.reshape(out, (cfg.n_latents, cfg.llm_dim))


# ---------------------------------------------------------------------------
# connector bank and parameter accounting

class ConnectorBank:
    """Connectors for the model's injection layers.

    Separate mode instantiates one full connector per injection layer.
    Shared mode keeps a single latent seed and cross-attention weight set
    (the same Tensor objects at every layer) with per-layer projections.
    """

    def __init__(self, cfg: ConnectorConfig, profiles: list[EncoderProfile],
                 injection_layers: list[int], seed: int):
        self.cfg = cfg
        self.profiles = profiles
        self.injection_layers = list(injection_layers)
        self.rmap = build_receptive_map(profiles, cfg)
        self.per_layer: dict[int, ConnectorParams] = {}
        if cfg.shared:
            base = init_connector_params(cfg, profiles, derive_seed(seed, "shared"))
            for layer in self.injection_layers:
                rng = SplitMix64(derive_seed(seed, "proj", layer))
                proj = Tensor(rng.fill_gauss((cfg.latent_dim, cfg.llm_dim),
                                             std=1.0 / math.sqrt(cfg.latent_dim)),
                              requires_grad=True)
                proj_b = Tensor(np.zeros(cfg.llm_dim), requires_grad=True)
                self.per_layer[layer] = ConnectorParams(
                    base.seed, base.wq, base.wk, base.wv, proj, proj_b)
        else:
            for layer in self.injection_layers:
                self.per_layer[layer] = init_connector_params(
                    cfg, profiles, derive_seed(seed, "conn", layer))

    def forward_batch(self, layer: int, feats: dict[str, Tensor]) -> Tensor:
        return connector_forward_batch(self.per_layer[layer], feats,
                                       self.rmap, self.cfg)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.cfg.shared:
            first = self.per_layer[self.injection_layers[0]]
            out.update({k: v for k, v in first.named("connector.shared").items()
                        if not k.endswith((".proj", ".proj_b"))})
            for layer in self.injection_layers:
                p = self.per_layer[layer]
                out[f"connector.L{layer}.proj"] = p.proj
                out[f"connector.L{layer}.proj_b"] = p.proj_b
        else:
            for layer in self.injection_layers:
                out.update(self.per_layer[layer].named(f"connector.L{layer}"))
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def connector_param_count(cfg: ConnectorConfig, profiles: list[EncoderProfile],
                          n_injection_layers: int) -> int:
    """Closed-form parameter count for the given sharing mode."""
    ld = cfg.latent_dim
    seed = ld
    xattn = ld * ld + sum(2 * p.dim * ld for p in profiles)
    proj = ld * cfg.llm_dim + cfg.llm_dim
    if cfg.shared:
        return (seed + xattn) + n_injection_layers * proj
    return n_injection_layers * (seed + xattn + proj)
