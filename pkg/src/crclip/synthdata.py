"""
Synthetic paired (clip, caption) data over verb x noun classes.

Each clip renders its verb as a cosine band along the width axis and its noun
as a band along the height axis, plus Gaussian noise. Verb bands use even
frequencies, so the noiseless pattern is left-right symmetric. Captions read
``[BOS, verb, noun, filler..., EOS]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigurationError, InputError

BOS_ID = 0
EOS_ID = 1
N_FILLERS = 8
AMPLITUDE = 0.2


@dataclass(frozen=True)
class SampleLabel:
    verb_id: int
    noun_id: int


@dataclass(frozen=True)
class Geometry:
    frames: int = 2
    height: int = 16
    width: int = 16
    channels: int = 3
    patch: int = 8

    def validate(self) -> None:
        if min(self.frames, self.height, self.width, self.channels, self.patch) < 1:
            raise ConfigurationError(f"all geometry sizes must be positive: {self}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigurationError(
                f"frame size {self.height}x{self.width} not divisible by patch {self.patch}")


@dataclass
class SynthDataset:
    clips: np.ndarray        # (N, T, H, W, C) in [0, 1]
    captions: np.ndarray     # (N, L) token ids
    labels: np.ndarray       # (N, 2) verb / noun ids
    relevance: np.ndarray    # (N, N)
    n_verbs: int
    n_nouns: int
    geometry: Geometry = Geometry()

    def __post_init__(self):
        n = len(self.clips)
        if not (len(self.captions) == len(self.labels) == n):
            raise InputError("clips, captions and labels must have equal lengths")
        if self.relevance.shape != (n, n):
            raise InputError(f"relevance must be {n}x{n}, got {self.relevance.shape}")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def vocab_size(self) -> int:
        return vocab_size(self.n_verbs, self.n_nouns)

    @property
    def sample_labels(self):
        return [SampleLabel(int(v), int(n)) for v, n in self.labels]

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return SynthDataset(self.clips[idx], self.captions[idx], self.labels[idx],
                            self.relevance[np.ix_(idx, idx)], self.n_verbs, self.n_nouns,
                            self.geometry)


def vocab_size(n_verbs: int, n_nouns: int) -> int:
    return 2 + n_verbs + n_nouns + N_FILLERS


def verb_token(verb_id: int) -> int:
    return 2 + verb_id


def noun_token(noun_id: int, n_verbs: int) -> int:
    return 2 + n_verbs + noun_id


def _label_array(labels) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        arr = labels.astype(np.int64)
    else:
        arr = np.array([(l.verb_id, l.noun_id) if isinstance(l, SampleLabel) else tuple(l)
                        for l in labels], dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError("labels must be (verb_id, noun_id) pairs")
    return arr


def build_relevance(labels_a, labels_b) -> np.ndarray:
    """C[i, j] = 0.5 * [same verb] + 0.5 * [same noun]."""
    a, b = _label_array(labels_a), _label_array(labels_b)
    if len(a) == 0 or len(b) == 0:
        raise InputError("label lists must be non-empty")
    verb = a[:, None, 0] == b[None, :, 0]
    noun = a[:, None, 1] == b[None, :, 1]
    return 0.5 * verb + 0.5 * noun


def _cosine_band(n: int, k: int) -> np.ndarray:
    return np.cos(np.pi * k * (np.arange(n) + 0.5) / n)


def class_pattern(verb_id: int, noun_id: int, geom: Geometry) -> np.ndarray:
    """Noiseless (T, H, W, C) rendering of one label."""
    if 2 * (verb_id + 1) >= geom.width or noun_id + 1 >= geom.height:
        raise ConfigurationError("too many classes for the frame resolution")
    along_w = _cosine_band(geom.width, 2 * (verb_id + 1))
    along_h = _cosine_band(geom.height, noun_id + 1)
    if geom.channels == 1:
        verb_mix = noun_mix = np.ones(1)
    else:
        verb_mix = np.linspace(1.0, 0.0, geom.channels)
        noun_mix = verb_mix[::-1]
    frame = 0.5 + AMPLITUDE * (along_w[None, :, None] * verb_mix
                               + along_h[:, None, None] * noun_mix)
    return np.broadcast_to(frame, (geom.frames,) + frame.shape).copy()


def render_clip(label: SampleLabel, geom: Geometry, noise_seed: int,
                sigma: float = 0.05) -> np.ndarray:
    rng = np.random.default_rng(noise_seed)
    clip = class_pattern(label.verb_id, label.noun_id, geom)
    clip = clip + rng.normal(0.0, sigma, size=clip.shape)
    return np.clip(clip, 0.0, 1.0)


def make_caption(label: SampleLabel, n_verbs: int, n_nouns: int, length: int,
                 rng: np.random.Generator) -> np.ndarray:
    if length < 4:
        raise ConfigurationError("captions need room for BOS, verb, noun and EOS")
    first_filler = 2 + n_verbs + n_nouns
    fillers = rng.integers(first_filler, first_filler + N_FILLERS, size=length - 4)
    return np.concatenate([[BOS_ID, verb_token(label.verb_id),
                            noun_token(label.noun_id, n_verbs)], fillers, [EOS_ID]]).astype(np.int64)


def generate(seed: int, n_samples: int = 256, n_verbs: int = 4, n_nouns: int = 6,
             geometry: Geometry = Geometry(), caption_length: int = 6,
             sigma: float = 0.05) -> SynthDataset:
    """Deterministic dataset; labels cycle through all cells before shuffling."""
    if n_verbs < 1 or n_nouns < 1 or n_verbs * n_nouns < 2:
        raise ConfigurationError("need at least two (verb, noun) cells")
    if n_samples < 1:
        raise ConfigurationError("need at least one sample")
    geometry.validate()
    rng = np.random.default_rng(seed)
    cells = [(v, n) for v in range(n_verbs) for n in range(n_nouns)]
    labels = np.array([cells[i % len(cells)] for i in range(n_samples)], dtype=np.int64)
    labels = labels[rng.permutation(n_samples)]
    noise_seeds = rng.integers(0, 2**63 - 1, size=n_samples)
    clips, captions = [], []
    for (v, n), ns in zip(labels, noise_seeds):
        lab = SampleLabel(int(v), int(n))
        clips.append(render_clip(lab, geometry, int(ns), sigma))
        captions.append(make_caption(lab, n_verbs, n_nouns, caption_length, rng))
    return SynthDataset(np.stack(clips), np.stack(captions), labels,
                        build_relevance(labels, labels), n_verbs, n_nouns, geometry)


def split(ds: SynthDataset, train_fraction: float = 0.75,
          seed: int = 0) -> Tuple[SynthDataset, SynthDataset]:
    """Seeded disjoint train/test split; relevance is sliced to match."""
    if not 0.0 < train_fraction < 1.0:
        raise InputError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    idx_train, idx_test = split_indices(len(ds), train_fraction, seed)
    return ds.subset(idx_train), ds.subset(idx_test)


def split_indices(n: int, train_fraction: float, seed: int):
    if not 0.0 < train_fraction < 1.0:
        raise InputError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])
