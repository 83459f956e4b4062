"""Synthetic audio-event task: feature grids with known labels, frozen mock
encoders, and tokenized question/answer pairs.

Each sample is a T x F "spectrogram" containing 1-2 Gaussian-blob events.
An event's frequency band (and amplitude sign) encodes its class, so the
class is linearly recoverable from the raw grid; failures downstream
indict the architecture, never the data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensor import Tensor

GRID_T = 16
GRID_F = 8
N_CLASSES = 16
GRID_CLIP = 4.0

TASK_KINDS = ("classify", "first_event", "count")


# ---------------------------------------------------------------------------
# vocabulary

class Vocabulary:
    """Fixed 64-token vocabulary; ids are stable across runs."""

    SIZE = 64

    def __init__(self):
        words = ["<pad>", "<bos>", "<eos>", "<sys>", "<q>", "<a>"]
        words += [f"c{i}" for i in range(N_CLASSES)]
        words += ["one", "two", "three"]
        words += ["first", "second"]
        words += ["which", "sound", "heard", "howmany", "what", "is", "in", "audio"]
        while len(words) < self.SIZE:
            words.append(f"<u{len(words)}>")
        self._words = words
        self._ids = {w: i for i, w in enumerate(words)}

    def encode(self, word: str) -> int:
        return self._ids[word]

    def decode(self, token_id: int) -> str:
        return self._words[token_id]

    def encode_all(self, words) -> list[int]:
        return [self._ids[w] for w in words]

    def decode_all(self, ids) -> list[str]:
        return [self._words[i] for i in ids]

    @property
    def pad(self) -> int:
        return self._ids["<pad>"]

    @property
    def bos(self) -> int:
        return self._ids["<bos>"]

    @property
    def eos(self) -> int:
        return self._ids["<eos>"]

    @property
    def answer_marker(self) -> int:
        return self._ids["<a>"]

    def class_token(self, class_id: int) -> int:
        return self._ids[f"c{class_id}"]

    def count_token(self, n: int) -> int:
        return self._ids[["one", "two", "three"][n - 1]]


VOCAB = Vocabulary()

_QUESTIONS = {
    "classify": ["<q>", "which", "sound", "heard"],
    "first_event": ["<q>", "which", "first", "sound"],
    "count": ["<q>", "howmany", "sound", "heard"],
}


# ---------------------------------------------------------------------------
# events and grids

@dataclass(frozen=True)
class EventSpec:
    class_id: int          # in [0, 16)
    onset: int             # time frame in [0, T)
    duration: int          # frames, >= 2, onset + duration <= T
    band_center: float     # frequency bin; base band for the class +- <1 bin jitter

    @staticmethod
    def base_band(class_id: int) -> int:
        return class_id % GRID_F

    @staticmethod
    def amplitude_sign(class_id: int) -> float:
        return 1.0 if class_id < GRID_F else -1.0


@dataclass
class FeatureGrid:
    values: np.ndarray  # (T, F) float64, bounded in [-GRID_CLIP, GRID_CLIP]


@dataclass
class SyntheticSample:
    grid: FeatureGrid
    events: list[EventSpec]
    prompt_tokens: list[int]       # system + question + answer marker
    response_tokens: list[int]     # answer word + <eos>
    response_mask: list[bool]      # over prompt+response; True only on response
    task_kind: str
    seed: int
    difficulty: str = "easy"

    @property
    def tokens(self) -> list[int]:
        return self.prompt_tokens + self.response_tokens


def _render_events(events: list[EventSpec], rng: SplitMix64,
                   noise_sd: float) -> np.ndarray:
    t_idx = np.arange(GRID_T)[:, None]
    f_idx = np.arange(GRID_F)[None, :]
    grid = np.zeros((GRID_T, GRID_F))
    for ev in events:
        tc = ev.onset + ev.duration / 2.0
        sig_t = max(ev.duration / 4.0, 0.75)
        sig_f = 0.5
        amp = 2.0 * EventSpec.amplitude_sign(ev.class_id)
        grid += amp * np.exp(-((t_idx - tc) ** 2 / (2 * sig_t**2)
                               + (f_idx - ev.band_center) ** 2 / (2 * sig_f**2)))
    grid += rng.fill_gauss((GRID_T, GRID_F), std=noise_sd)
    return np.clip(grid, -GRID_CLIP, GRID_CLIP)


def _draw_event(rng: SplitMix64, class_id: int, difficulty: str,
                min_onset: int = 0) -> EventSpec:
    lo, hi = (4, 8) if difficulty == "easy" else (2, 4)
    hi = min(hi, GRID_T - min_onset)
    lo = min(lo, hi)
    duration = lo + rng.randint(hi - lo + 1)
    onset = min_onset + rng.randint(GRID_T - duration - min_onset + 1)
    jitter_max = 0.3 if difficulty == "easy" else 0.45
    band = EventSpec.base_band(class_id) + rng.uniform(-jitter_max, jitter_max)
    band = float(np.clip(band, 0.0, GRID_F - 1))
    return EventSpec(class_id, onset, duration, band)


def generate_sample(seed: int, task_kind: str = "classify",
                    difficulty: str = "easy") -> SyntheticSample:
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = SplitMix64(derive_seed(seed, "sample", task_kind, difficulty))
    noise_sd = 0.1 if difficulty == "easy" else 0.2

    if task_kind == "classify":
        events = [_draw_event(rng, rng.randint(N_CLASSES), difficulty)]
        answer = f"c{events[0].class_id}"
    elif task_kind == "first_event":
        c1 = rng.randint(N_CLASSES)
        c2 = (c1 + 1 + rng.randint(N_CLASSES - 1)) % N_CLASSES
        first = _draw_event(rng, c1, difficulty)
        # Second event starts at least 3 frames after the first onset.
        second = _draw_event(rng, c2, difficulty,
                             min_onset=min(first.onset + 3, GRID_T - 3))
        events = [first, second]
        answer = f"c{first.class_id}"
    else:  # count
        n = 1 + rng.randint(2)
        events = [_draw_event(rng, rng.randint(N_CLASSES), difficulty)
                  for _ in range(n)]
        answer = ["one", "two"][n - 1]

    grid = FeatureGrid(_render_events(events, rng, noise_sd))
    prompt = VOCAB.encode_all(["<bos>", "<sys>"] + _QUESTIONS[task_kind] + ["<a>"])
    response = [VOCAB.encode(answer), VOCAB.eos]
    mask = [False] * len(prompt) + [True] * len(response)
    return SyntheticSample(grid, events, prompt, response, mask, task_kind,
                           seed, difficulty)


# ---------------------------------------------------------------------------
# mock encoders

@dataclass
class EncoderProfile:
    """Frozen random linear patch encoder standing in for a pretrained model.

    The projection never receives gradients; it is fixed at construction
    from the profile's seed.
    """

    name: str
    grid_t: int
    grid_f: int
    dim: int
    seed: int
    projection: Tensor = field(init=False)

    def __post_init__(self):
        if GRID_T % self.grid_t or GRID_F % self.grid_f:
            raise ValueError(
                f"encoder grid {self.grid_t}x{self.grid_f} does not divide "
                f"input {GRID_T}x{GRID_F}")
        pd = self.patch_dim
        w = SplitMix64(derive_seed(self.seed, "proj")).fill_gauss(
            (pd, self.dim), std=1.0 / np.sqrt(pd))
        self.projection = Tensor(w, requires_grad=False,
                                 name=f"encoder.{self.name}.projection")

    @property
    def patch_dim(self) -> int:
        return (GRID_T // self.grid_t) * (GRID_F // self.grid_f)

    @property
    def n_tokens(self) -> int:
        return self.grid_t * self.grid_f


@dataclass
class EncoderOutput:
    tokens: Tensor  # (grid_t, grid_f, dim)
    profile: EncoderProfile


def _patches(grids: np.ndarray, profile: EncoderProfile) -> np.ndarray:
    """(B, T, F) -> (B, grid_t * grid_f, patch_dim), patches in (t, f) order."""
    b = grids.shape[0]
    pt = GRID_T // profile.grid_t
    pf = GRID_F // profile.grid_f
    p = grids.reshape(b, profile.grid_t, pt, profile.grid_f, pf)
    p = p.transpose(0, 1, 3, 2, 4).reshape(b, profile.n_tokens, pt * pf)
    return np.ascontiguousarray(p)


def encoder_forward(profile: EncoderProfile, grid: FeatureGrid) -> EncoderOutput:
    if grid.values.shape != (GRID_T, GRID_F):
        raise ValueError(f"grid shape {grid.values.shape} incompatible with "
                         f"expected ({GRID_T}, {GRID_F})")
    toks = _patches(grid.values[None], profile)[0] @ profile.projection.data
    toks = toks.reshape(profile.grid_t, profile.grid_f, profile.dim)
    return EncoderOutput(Tensor(toks), profile)


def encode_batch(profile: EncoderProfile, grids: np.ndarray) -> Tensor:
    """Batched encoder forward: (B, T, F) -> Tensor (B, n_tokens, dim)."""
    return Tensor(_patches(grids, profile) @ profile.projection.data)


def make_default_ensemble(master_seed: int) -> list[EncoderProfile]:
    """Four mock encoders: one fine-grained plus three coarse specialists."""
    specs = [("fine", 8, 4, 48), ("general", 4, 1, 32),
             ("music", 4, 1, 32), ("speech", 4, 1, 32)]
    return [EncoderProfile(name, gt, gf, dim, derive_seed(master_seed, "enc", name))
            for name, gt, gf, dim in specs]


def make_encoder_set(kind: str, master_seed: int) -> list[EncoderProfile]:
    if kind == "ensemble":
        return make_default_ensemble(master_seed)
    if kind == "fine":
        return make_default_ensemble(master_seed)[:1]
    raise ValueError(f"unknown encoder set {kind!r}")


# ---------------------------------------------------------------------------
# dataset dump/load (newline-delimited JSON, for debugging reproducibility)

def dump_dataset(samples, path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            rec = {
                "seed": s.seed,
                "task": s.task_kind,
                "difficulty": s.difficulty,
                "events": [{"class_id": e.class_id, "onset": e.onset,
                            "duration": e.duration, "band_center": e.band_center}
                           for e in s.events],
                "prompt_tokens": s.prompt_tokens,
                "response_tokens": s.response_tokens,
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> list[SyntheticSample]:
    """Regenerate samples from their recorded seeds, checking token identity."""
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            rec = json.loads(line)
            s = generate_sample(rec["seed"], rec["task"], rec["difficulty"])
            if s.prompt_tokens != rec["prompt_tokens"] or \
                    s.response_tokens != rec["response_tokens"]:
                raise ValueError(f"line {line_no}: regenerated sample does not "
                                 f"match the dumped record")
            out.append(s)
    return out
