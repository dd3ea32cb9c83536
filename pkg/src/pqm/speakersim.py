"""Synthetic multi-speaker classification task.

Every utterance starts as a clean latent sequence drawn around one of the
class centroids. The label is a fixed function of that clean sequence: the
centroid nearest to its time average. A speaker then distorts each latent
frame with a small rotation, a per-dimension gain and an additive bias, and
the distorted frames are tokenised by nearest-prototype lookup on a fixed
grid of prototypes. Labels therefore never depend on the speaker, while the
token statistics do.

An optional *domain* profile is applied before the speaker's own transform.
Pools that share a domain resemble each other more than they resemble
clean (domain-free) data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.linalg import expm

from .tensor import Rng, derive_seed

NUM_CLASSES = 10
SEQ_LEN = 20
VOCAB = 64
LATENT_DIM = 16

CONCEPT_SEED = 20240917
CENTROID_SCALE = 0.55
FRAME_NOISE = 1.0


@dataclass(frozen=True)
class Concept:
    centroids: np.ndarray  # NUM_CLASSES x LATENT_DIM
    prototypes: np.ndarray  # VOCAB x LATENT_DIM


@lru_cache(maxsize=None)
def concept() -> Concept:
    rng = Rng(CONCEPT_SEED)
    centroids = rng.normal((NUM_CLASSES, LATENT_DIM), 0.0, CENTROID_SCALE)
    spread = float(np.sqrt(CENTROID_SCALE**2 + FRAME_NOISE**2))
    prototypes = rng.normal((VOCAB, LATENT_DIM), 0.0, spread)
    return Concept(centroids, prototypes)


@dataclass(frozen=True)
class SpeakerProfile:
    id: str
    gain: np.ndarray
    bias: np.ndarray
    mix: np.ndarray  # orthogonal LATENT_DIM x LATENT_DIM
    seed: int

    @classmethod
    def identity(cls, id: str = "clean") -> "SpeakerProfile":
        return cls(id, np.ones(LATENT_DIM), np.zeros(LATENT_DIM), np.eye(LATENT_DIM), 0)

    @classmethod
    def random(cls, id: str, seed: int, rotation_std: float = 0.1) -> "SpeakerProfile":
        rng = Rng(seed)
        gain = 0.5 + rng.uniform(LATENT_DIM)
        bias = rng.normal(LATENT_DIM, 0.0, 0.1)
        s = rng.normal((LATENT_DIM, LATENT_DIM), 0.0, rotation_std)
        mix = expm(np.triu(s, 1) - np.triu(s, 1).T)
        return cls(id, gain, bias, mix, seed)

    def apply(self, frames: np.ndarray) -> np.ndarray:
        """Transform latent frames (..., LATENT_DIM)."""
        return (frames @ self.mix.T) * self.gain + self.bias


def tokenise(frames: np.ndarray) -> np.ndarray:
    protos = concept().prototypes
    flat = frames.reshape(-1, LATENT_DIM)
    d2 = (flat**2).sum(1)[:, None] - 2.0 * flat @ protos.T + (protos**2).sum(1)[None, :]
    return np.argmin(d2, axis=1).reshape(frames.shape[:-1]).astype(np.int64)


def label_of(latent: np.ndarray) -> np.ndarray:
    """Class of each clean latent sequence (..., SEQ_LEN, LATENT_DIM)."""
    mean = latent.mean(axis=-2)
    c = concept().centroids
    d2 = ((mean[..., None, :] - c) ** 2).sum(-1)
    return np.argmin(d2, axis=-1).astype(np.int64)


def sample_latents(n: int, rng: Rng) -> np.ndarray:
    classes = rng.integers(0, NUM_CLASSES, size=n)
    noise = rng.normal((n, SEQ_LEN, LATENT_DIM), 0.0, FRAME_NOISE)
    return concept().centroids[classes][:, None, :] + noise


def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/dev/test sizes in the ratio 2:1:2, rounded half up."""
    n_train = int(np.floor(0.4 * n + 0.5))
    n_dev = int(np.floor(0.2 * n + 0.5))
    return n_train, n_dev, n - n_train - n_dev


def _split_order(speaker_id: str, n: int) -> np.ndarray:
    keys = [hashlib.sha256(f"{speaker_id}/{i}".encode()).digest() for i in range(n)]
    return np.array(sorted(range(n), key=keys.__getitem__), dtype=np.int64)


@dataclass
class AdaptationDataset:
    speaker_id: str
    tokens: np.ndarray  # N x SEQ_LEN
    labels: np.ndarray  # N
    train: np.ndarray = field(default=None)
    dev: np.ndarray = field(default=None)
    test: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.train is None:
            order = _split_order(self.speaker_id, len(self.labels))
            n_train, n_dev, _ = split_sizes(len(order))
            self.train = order[:n_train]
            self.dev = order[n_train : n_train + n_dev]
            self.test = order[n_train + n_dev :]

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self, name)
        return self.tokens[idx], self.labels[idx]

    def subsample_train(self, count: int) -> "AdaptationDataset":
        """Keep the first ``count`` train utterances; dev and test are untouched."""
        if not 0 <= count <= len(self.train):
            raise ValueError(f"train split has {len(self.train)} utterances, asked for {count}")
        return AdaptationDataset(self.speaker_id, self.tokens, self.labels, self.train[:count], self.dev, self.test)

    def with_labels(self, labels: np.ndarray) -> "AdaptationDataset":
        return AdaptationDataset(self.speaker_id, self.tokens, np.asarray(labels, np.int64), self.train, self.dev, self.test)

    def records(self) -> Iterable[dict]:
        """Records grouped train, dev, test, each in split order."""
        for name in ("train", "dev", "test"):
            for i in getattr(self, name):
                yield {
                    "speaker_id": self.speaker_id,
                    "split": name,
                    "tokens": [int(t) for t in self.tokens[i]],
                    "label": int(self.labels[i]),
                }


def utterances(profile: SpeakerProfile, n: int, seed: int, domain: SpeakerProfile | None = None) -> AdaptationDataset:
    rng = Rng(derive_seed("utterances", profile.id, seed))
    latent = sample_latents(n, rng)
    frames = latent if domain is None else domain.apply(latent)
    return AdaptationDataset(profile.id, tokenise(profile.apply(frames)), label_of(latent))


def _speakers(prefix: str, n: int, utts: int, seed: int, domain: SpeakerProfile | None):
    out = []
    for i in range(n):
        sid = f"{prefix}{seed}-{i:03d}"
        profile = SpeakerProfile.random(sid, derive_seed("speaker", prefix, seed, i))
        out.append((profile, utterances(profile, utts, seed, domain)))
    return out


def generate_pool(
    n_speakers: int, utts_per_speaker: int, seed: int, domain: SpeakerProfile | None = None, prefix: str = "pool"
) -> list[tuple[SpeakerProfile, AdaptationDataset]]:
    if n_speakers < 1:
        raise ValueError("need at least one speaker")
    return _speakers(prefix, n_speakers, utts_per_speaker, seed, domain)


def generate_adaptation_speakers(
    n: int, utts: int = 150, seed: int = 0, domain: SpeakerProfile | None = None
) -> list[tuple[SpeakerProfile, AdaptationDataset]]:
    if utts < 5:
        raise ValueError("each adaptation speaker needs at least 5 utterances")
    return _speakers("spk", n, utts, seed, domain)


DOMAIN_ROTATION_STD = 0.3


def make_domain(seed: int, rotation_std: float | None = None) -> SpeakerProfile:
    """Shared shift applied to every speaker of a target domain."""
    std = DOMAIN_ROTATION_STD if rotation_std is None else rotation_std
    return SpeakerProfile.random(f"domain{seed}", derive_seed("domain", seed), rotation_std=std)


def stack(datasets: Iterable[AdaptationDataset], split: str) -> tuple[np.ndarray, np.ndarray]:
    parts = [ds.split(split) for ds in datasets]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def write_jsonl(path: str | Path, datasets: Iterable[AdaptationDataset]) -> None:
    with open(path, "w") as fh:
        for ds in datasets:
            for rec in ds.records():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[AdaptationDataset]:
    rows: dict[str, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.setdefault(rec["speaker_id"], []).append(rec)
    out = []
    for sid, recs in rows.items():
        tokens = np.array([r["tokens"] for r in recs], dtype=np.int64)
        labels = np.array([r["label"] for r in recs], dtype=np.int64)
        idx = {name: np.array([i for i, r in enumerate(recs) if r["split"] == name], dtype=np.int64) for name in ("train", "dev", "test")}
        out.append(AdaptationDataset(sid, tokens, labels, idx["train"], idx["dev"], idx["test"]))
    return out
