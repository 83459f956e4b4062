"""Minimal decoder-only transformer with three audio integration wirings.

* Baseline: connector output inserted into the token stream between the
  system and user spans before layer 1 and propagated through every layer.
* Delayed fusion: layers below k run text-only; the connector output is
  concatenated into the stream at layer k.
* Attention-only: audio never enters the token stream. For each layer at
  or past the start layer, that layer's connector produces fresh audio
  rows which contribute keys/values only; they have no query rows and are
  dropped before the FFN.

Audio rows carry the rotary positions of the audio slot between the
system and user spans in every mode, so positional semantics match the
baseline layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .connector import ConnectorBank, ConnectorConfig
from .rng import SplitMix64, derive_seed
from .synth import EncoderOutput, EncoderProfile, SyntheticSample, VOCAB
from .tensor import Tensor

_MASKED = -1e30
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    ffn_hidden: int = 256
    max_seq: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class Baseline:
    pass


@dataclass(frozen=True)
class DelayedFusion:
    k: int = 5


@dataclass(frozen=True)
class AttentionOnly:
    start_layer: int = 5
    shared: bool = False


FusionMode = Union[Baseline, DelayedFusion, AttentionOnly]


def validate_mode(mode: FusionMode, cfg: ModelConfig) -> None:
    if isinstance(mode, DelayedFusion) and not 1 <= mode.k <= cfg.n_layers:
        raise ValueError("k must be in [1, n_layers]")
    if isinstance(mode, AttentionOnly) and not 1 <= mode.start_layer <= cfg.n_layers:
        raise ValueError("start_layer must be in [1, n_layers]")


@dataclass(frozen=True)
class SequenceLayout:
    """Span lengths of the canonical sequence order: system, audio slot,
    user prompt, response. The audio slot is materialized in the token
    stream only for baseline / delayed-fusion wiring."""

    sys_len: int
    n_audio: int
    user_len: int
    resp_len: int

    @property
    def text_len(self) -> int:
        return self.sys_len + self.user_len + self.resp_len

    @property
    def stream_len(self) -> int:
        return self.text_len + self.n_audio

    def audio_positions(self) -> np.ndarray:
        return np.arange(self.sys_len, self.sys_len + self.n_audio)

    def text_positions_skipping_slot(self) -> np.ndarray:
        """Rotary ids for text tokens when the slot is not materialized."""
        return np.concatenate([
            np.arange(self.sys_len),
            np.arange(self.sys_len + self.n_audio,
                      self.n_audio + self.text_len)])


def layout_for(sample_or_prompt, n_audio: int,
               resp_len: Optional[int] = None) -> SequenceLayout:
    if isinstance(sample_or_prompt, SyntheticSample):
        s = sample_or_prompt
        return SequenceLayout(2, n_audio, len(s.prompt_tokens) - 2,
                              len(s.response_tokens))
    return SequenceLayout(2, n_audio, len(sample_or_prompt) - 2, resp_len or 0)


def _audio_active(mode: FusionMode, layer: int, layout: SequenceLayout) -> bool:
    if layout.n_audio == 0:
        return False
    if isinstance(mode, Baseline):
        return True
    if isinstance(mode, DelayedFusion):
        return layer >= mode.k
    return layer >= mode.start_layer


def build_attention_mask(layout: SequenceLayout, mode: FusionMode,
                         layer: int, n_layers: int = 8) -> np.ndarray:
    """Boolean allowed-attention matrix for one layer.

    Rows are query positions, columns key positions. In attention-only
    wiring the audio keys occupy the trailing columns and there are no
    audio query rows.
    """
    if not 1 <= layer <= n_layers:
        raise ValueError(f"layer {layer} out of range [1, {n_layers}]")
    lt = layout.text_len
    if not _audio_active(mode, layer, layout):
        return np.tril(np.ones((lt, lt), dtype=bool))
    if isinstance(mode, AttentionOnly):
        mask = np.zeros((lt, lt + layout.n_audio), dtype=bool)
        mask[:, :lt] = np.tril(np.ones((lt, lt), dtype=bool))
        mask[layout.sys_len:, lt:] = True  # system prompt precedes audio
        return mask
    ls = layout.stream_len
    return np.tril(np.ones((ls, ls), dtype=bool))


def position_ids(layout: SequenceLayout, mode: FusionMode,
                 layer: int) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Rotary position ids for (stream-or-text rows, audio key/value rows)."""
    active = _audio_active(mode, layer, layout)
    if layout.n_audio == 0:
        return np.arange(layout.text_len), None
    if isinstance(mode, AttentionOnly):
        audio = layout.audio_positions() if active else None
        return layout.text_positions_skipping_slot(), audio
    if active:  # materialized stream
        return np.arange(layout.stream_len), None
    return np.arange(layout.text_len), None  # delayed fusion below k


@dataclass
class ForwardStats:
    """Instrumentation filled during forward passes."""
    ffn_audio_rows: int = 0
    per_layer_ffn_audio_rows: dict[int, int] = field(default_factory=dict)

    def record(self, layer: int, rows: int) -> None:
        self.ffn_audio_rows += rows
        self.per_layer_ffn_audio_rows[layer] = \
            self.per_layer_ffn_audio_rows.get(layer, 0) + rows


class PalModel:
    """Decoder transformer plus its connector bank for one fusion mode."""

    def __init__(self, cfg: ModelConfig, mode: FusionMode,
                 conn_cfg: ConnectorConfig, profiles: list[EncoderProfile],
                 seed: int):
        validate_mode(mode, cfg)
        self.cfg = cfg
        self.mode = mode
        self.profiles = profiles
        self.seed = seed
        shared = mode.shared if isinstance(mode, AttentionOnly) else False
        self.conn_cfg = replace(conn_cfg, llm_dim=cfg.d_model, shared=shared)

        if isinstance(mode, AttentionOnly):
            injection = list(range(mode.start_layer, cfg.n_layers + 1))
        elif isinstance(mode, DelayedFusion):
            injection = [mode.k]
        else:
            injection = [1]
        self.injection_layers = injection
        self.connectors = ConnectorBank(self.conn_cfg, profiles, injection,
                                        derive_seed(seed, "connector"))
        self.params = self._init_transformer(derive_seed(seed, "transformer"))
        self._rope_cos, self._rope_sin = self._rope_tables()

    # -- parameters ---------------------------------------------------------

    def _init_transformer(self, seed: int) -> dict[str, Tensor]:
        cfg = self.cfg
        rng = SplitMix64(seed)
        d, ffn = cfg.d_model, cfg.ffn_hidden
        resid_scale = 1.0 / math.sqrt(2 * cfg.n_layers)

        def gauss(shape, std):
            return Tensor(rng.fill_gauss(shape, std=std), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        p: dict[str, Tensor] = {"emb": gauss((cfg.vocab, d), 1.0)}
        for i in range(1, cfg.n_layers + 1):
            pre = f"layers.{i}"
            p[f"{pre}.attn_norm"] = ones(d)
            p[f"{pre}.attn.wq"] = gauss((d, d), 1.0 / math.sqrt(d))
            p[f"{pre}.attn.wk"] = gauss((d, d), 1.0 / math.sqrt(d))
            p[f"{pre}.attn.wv"] = gauss((d, d), 1.0 / math.sqrt(d))
            p[f"{pre}.attn.wo"] = gauss((d, d), resid_scale / math.sqrt(d))
            p[f"{pre}.ffn_norm"] = ones(d)
            p[f"{pre}.ffn.w_gate"] = gauss((d, ffn), 1.0 / math.sqrt(d))
            p[f"{pre}.ffn.w_up"] = gauss((d, ffn), 1.0 / math.sqrt(d))
            p[f"{pre}.ffn.w_down"] = gauss((ffn, d), resid_scale / math.sqrt(ffn))
        p["final_norm"] = ones(d)
        p["unemb"] = gauss((d, cfg.vocab), 1.0 / math.sqrt(d))
        return p

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.connectors.named_parameters())
        return out

    def connector_parameters(self) -> dict[str, Tensor]:
        return self.connectors.named_parameters()

    def transformer_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def param_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    # -- forward ------------------------------------------------------------

    def _rope_tables(self) -> tuple[np.ndarray, np.ndarray]:
        hd = self.cfg.head_dim
        inv = ROPE_BASE ** (-np.arange(0, hd // 2) * 2.0 / hd)
        angles = np.arange(self.cfg.max_seq)[:, None] * inv[None, :]
        return np.cos(angles), np.sin(angles)

    def _rope(self, x: Tensor, pos: np.ndarray) -> Tensor:
        cos = self._rope_cos[pos][None, None]
        sin = self._rope_sin[pos][None, None]
        return T.rope(x, cos, sin)

    def _heads(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return T.transpose(
            T.reshape(x, (b, l, self.cfg.n_heads, self.cfg.head_dim)),
            (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, _h, l, _hd = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, self.cfg.d_model))

    def forward_batch(self, tokens: np.ndarray, layout: SequenceLayout,
                      feats: Optional[dict[str, Tensor]] = None,
                      stats: Optional[ForwardStats] = None,
                      mask_fn=build_attention_mask,
                      capture_hidden: Optional[list] = None,
                      debug_route_audio_to_ffn: bool = False) -> Tensor:
        """Logits for text positions: (B, text_len, vocab).

        `tokens` holds text token ids (B, text_len); `feats` maps encoder
        name to batched token features. `mask_fn` exists so the verify
        suite can exercise deliberately corrupted masks.
        """
        cfg, mode = self.cfg, self.mode
        tokens = np.asarray(tokens)
        b, lt = tokens.shape
        if lt != layout.text_len:
            raise ValueError(f"tokens length {lt} != layout text length "
                             f"{layout.text_len}")
        if feats is None and layout.n_audio != 0:
            raise ValueError("layout has an audio slot but no encoder features")
        if layout.stream_len > cfg.max_seq:
            raise ValueError(f"sequence length {layout.stream_len} exceeds "
                             f"max_seq {cfg.max_seq}")

        s, n = layout.sys_len, layout.n_audio
        x = T.embedding(self.params["emb"], tokens)
        widened = False
        materializes = isinstance(mode, (Baseline, DelayedFusion)) and n > 0
        insertion_layer = self.injection_layers[0] if materializes else None

        for layer in range(1, cfg.n_layers + 1):
            if materializes and layer == insertion_layer:
                audio_tok = self.connectors.forward_batch(layer, feats)
                x = T.concat([T.narrow(x, 1, 0, s), audio_tok,
                              T.narrow(x, 1, s, lt - s)], axis=1)
                widened = True

            pre = f"layers.{layer}"
            pos, audio_pos = position_ids(layout, mode, layer)
            mask = mask_fn(layout, mode, layer, cfg.n_layers)
            bias = np.where(mask, 0.0, _MASKED)[None, None]

            h = T.rmsnorm(x, self.params[f"{pre}.attn_norm"])
            q = self._rope(self._heads(T.matmul(h, self.params[f"{pre}.attn.wq"])), pos)
            k = self._rope(self._heads(T.matmul(h, self.params[f"{pre}.attn.wk"])), pos)
            v = self._heads(T.matmul(h, self.params[f"{pre}.attn.wv"]))

            audio_rows = None
            if isinstance(mode, AttentionOnly) and _audio_active(mode, layer, layout):
                audio_llm = self.connectors.forward_batch(layer, feats)
                an = T.rmsnorm(audio_llm, self.params[f"{pre}.attn_norm"])
                k = T.concat([k, self._rope(self._heads(
                    T.matmul(an, self.params[f"{pre}.attn.wk"])), audio_pos)], axis=2)
                v = T.concat([v, self._heads(
                    T.matmul(an, self.params[f"{pre}.attn.wv"]))], axis=2)
                audio_rows = audio_llm

            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                             1.0 / math.sqrt(cfg.head_dim))
            weights = T.softmax(T.add(scores, T.const(bias)), axis=-1)
            attn = T.matmul(self._merge_heads(T.matmul(weights, v)),
                            self.params[f"{pre}.attn.wo"])
            x = T.add(x, attn)

            ffn_in = T.rmsnorm(x, self.params[f"{pre}.ffn_norm"])
            ffn_audio = b * n if widened else 0
            if debug_route_audio_to_ffn and audio_rows is not None:
                # Negative-control hook: deliberately violates the
                # attention-only contract by letting audio rows reach the FFN.
                ffn_in = T.concat(
                    [ffn_in, T.rmsnorm(audio_rows,
                                       self.params[f"{pre}.ffn_norm"])], axis=1)
                ffn_audio += b * n
            if stats is not None:
                stats.record(layer, ffn_audio)
            gate = T.silu(T.matmul(ffn_in, self.params[f"{pre}.ffn.w_gate"]))
            up = T.matmul(ffn_in, self.params[f"{pre}.ffn.w_up"])
            ffn = T.matmul(T.mul(gate, up), self.params[f"{pre}.ffn.w_down"])
            if debug_route_audio_to_ffn and audio_rows is not None:
                ffn = T.narrow(ffn, 1, 0, x.shape[1])
            x = T.add(x, ffn)

            if capture_hidden is not None:
                if widened:
                    text = np.concatenate(
                        [x.data[:, :s], x.data[:, s + n:]], axis=1)
                else:
                    text = x.data.copy()
                capture_hidden.append((layer, text))

        if widened:
            x = T.concat([T.narrow(x, 1, 0, s), T.narrow(x, 1, s + n, lt - s)],
                         axis=1)
        x = T.rmsnorm(x, self.params["final_norm"])
        return T.matmul(x, self.params["unemb"])

    def forward(self, sample: SyntheticSample,
                encoder_outputs: Optional[list[EncoderOutput]] = None,
                **kwargs) -> Tensor:
        """Single-sample forward; logits over text positions (len, vocab)."""
        feats, n_audio = self._feats_from_outputs(encoder_outputs)
        layout = layout_for(sample, n_audio)
        tokens = np.asarray([sample.tokens])
        out = self.forward_batch(tokens, layout, feats, **kwargs)
        return T.reshape(out, (layout.text_len, self.cfg.vocab))

    def _feats_from_outputs(self, encoder_outputs):
        if not encoder_outputs:
            return None, 0
        feats = {o.profile.name: T.reshape(
            o.tokens, (1, o.profile.n_tokens, o.profile.dim))
            for o in encoder_outputs}
        return feats, self.conn_cfg.n_latents

    # -- decoding -----------------------------------------------------------

    def decode_greedy_batch(self, prompts: np.ndarray,
                            feats: Optional[dict[str, Tensor]],
                            max_new: int) -> np.ndarray:
        """Greedy continuation of (B, Lp) prompts; returns (B, max_new) ids,
        padded with EOS once a row has finished."""
        n_audio = self.conn_cfg.n_latents if feats is not None else 0
        toks = np.asarray(prompts)
        b, lp = toks.shape
        if lp + n_audio + max_new > self.cfg.max_seq:
            raise ValueError("prompt plus max_new exceeds max_seq")
        out = np.full((b, max_new), VOCAB.eos, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for step in range(max_new):
            layout = SequenceLayout(2, n_audio, lp - 2, step)
            logits = self.forward_batch(toks, layout, feats)
            nxt = logits.data[:, -1].argmax(axis=1)
            nxt = np.where(done, VOCAB.eos, nxt)
            out[:, step] = nxt
            done |= nxt == VOCAB.eos
            if done.all():
                break
            toks = np.concatenate([toks, nxt[:, None]], axis=1)
        return out

    def decode_greedy(self, prompt_tokens: list[int],
                      encoder_outputs: Optional[list[EncoderOutput]],
                      max_new: int) -> list[int]:
        """Greedy decoding from a prompt ending with the answer marker.

        Returns generated ids up to and including EOS (or max_new tokens)."""
        if prompt_tokens[-1] != VOCAB.answer_marker:
            raise ValueError("prompt must end with the answer marker")
        feats, _ = self._feats_from_outputs(encoder_outputs)
        gen = self.decode_greedy_batch(np.asarray([prompt_tokens]), feats, max_new)
        ids = []
        for t in gen[0]:
            ids.append(int(t))
            if t == VOCAB.eos:
                break
        return ids
