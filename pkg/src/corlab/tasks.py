"""Synthetic binary token datasets with controllable semantic and
non-semantic (artifact) signal, plus the counterpart operator that stands
in for image-level self-blending."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import regions as rg

DATASET_MAGIC = b"CLBDAT1\x00"


def _region_indices(label: str, n_tokens: int) -> tuple[int, ...]:
    side = int(round(np.sqrt(n_tokens)))
    if side * side != n_tokens:
        raise ValueError("region labels require a square token grid")
    for spec in rg.grid_partition(side):
        if spec.label == label:
            return spec.indices
    raise ValueError(f"unknown region label {label!r}")


def _unit_pattern(seed_key: tuple, shape: tuple) -> np.ndarray:
    """Fixed pseudo-random unit-norm pattern for a given structural key."""
    import hashlib

    digest = hashlib.sha256(repr(seed_key).encode()).digest()
    entropy = int.from_bytes(digest[:8], "little")
    v = np.random.default_rng(np.random.SeedSequence(entropy)).normal(size=shape)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TaskSpec:
    n_tokens: int = 16
    dim: int = 32
    semantic_amp: float = 0.0
    artifact_amp: float = 0.0
    artifact_channels: tuple[int, ...] = tuple(range(24, 32))
    artifact_region: str = "foreground"
    noise_sigma: float = 1.0
    n_train: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "artifact_channels",
                           tuple(int(c) for c in self.artifact_channels))
        if self.artifact_amp > 0 and not self.artifact_channels:
            raise ValueError("artifact_amp > 0 requires nonempty artifact_channels")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")

    @property
    def semantic_channels(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.dim) if c not in self.artifact_channels)

    def artifact_pattern(self) -> np.ndarray:
        """(N, D) pattern: unit norm, exactly zero outside the artifact
        region tokens and artifact channels."""
        idx = _region_indices(self.artifact_region, self.n_tokens)
        sub = _unit_pattern(("artifact", self.seed, self.artifact_channels,
                             self.artifact_region),
                            (len(idx), len(self.artifact_channels)))
        pat = np.zeros((self.n_tokens, self.dim))
        pat[np.ix_(idx, self.artifact_channels)] = sub
        return pat

    def semantic_pattern(self) -> np.ndarray:
        """(N, D) global mean shift on the semantic channels, unit norm."""
        ch = self.semantic_channels
        row = _unit_pattern(("semantic", self.seed, ch), (len(ch),))
        pat = np.zeros((self.n_tokens, self.dim))
        pat[:, list(ch)] = row
        return pat / np.linalg.norm(pat)


@dataclass
class Dataset:
    spec: TaskSpec
    split: str
    tokens: np.ndarray   # (S, N, D)
    labels: np.ndarray   # (S,) uint8; 0 = real, 1 = fake

    def __len__(self) -> int:
        return self.labels.size


def _sample_noise(spec: TaskSpec, split: str, index: int) -> np.ndarray:
    split_id = {"train": 0, "test": 1}[split]
    ss = np.random.SeedSequence(spec.seed, spawn_key=(split_id, index))
    return np.random.default_rng(ss).normal(scale=spec.noise_sigma,
                                            size=(spec.n_tokens, spec.dim))


def generate(spec: TaskSpec, split: str) -> Dataset:
    """Deterministic balanced dataset; fake samples carry the semantic and
    artifact patterns, real samples carry only noise."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    n = spec.n_train if split == "train" else spec.n_test
    sem = spec.semantic_amp * spec.semantic_pattern()
    art = spec.artifact_amp * spec.artifact_pattern()
    tokens = np.empty((n, spec.n_tokens, spec.dim))
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        label = i % 2  # balanced, |#real - #fake| <= 1
        x = _sample_noise(spec, split, i)
        if label == 1:
            x = x + sem + art
        tokens[i] = x
        labels[i] = label
    return Dataset(spec, split, tokens, labels)


@dataclass(frozen=True)
class CounterpartOp:
    """Adds a fixed seeded pattern to target channels within a region,
    synthesizing a forgery-like discrepancy from any input."""

    perturb_amp: float = 1.0
    target_channels: tuple[int, ...] = tuple(range(24, 32))
    target_region: str = "foreground"
    seed: int = 0

    def __post_init__(self):
        if self.perturb_amp < 0:
            raise ValueError("perturb_amp must be nonnegative")
        object.__setattr__(self, "target_channels",
                           tuple(int(c) for c in self.target_channels))

    def pattern(self, n_tokens: int, dim: int) -> np.ndarray:
        idx = _region_indices(self.target_region, n_tokens)
        sub = _unit_pattern(("counterpart", self.seed, self.target_channels,
                             self.target_region),
                            (len(idx), len(self.target_channels)))
        pat = np.zeros((n_tokens, dim))
        pat[np.ix_(idx, self.target_channels)] = sub
        return pat

    def apply(self, tokens: np.ndarray) -> np.ndarray:
        """Counterpart tokens; label semantics are unchanged by design."""
        tokens = np.asarray(tokens, dtype=np.float64)
        n, d = tokens.shape[-2], tokens.shape[-1]
        idx = _region_indices(self.target_region, n)
        if self.target_channels and max(self.target_channels) >= d:
            raise ValueError("target channel out of range")
        if idx and max(idx) >= n:
            raise ValueError("target token out of range")
        return tokens + self.perturb_amp * self.pattern(n, d)


def counterpart(sample_tokens: np.ndarray, op: CounterpartOp) -> np.ndarray:
    return op.apply(sample_tokens)


def expected_gsnr(spec: TaskSpec, n_samples: int = 10_000, seed: int = 1234,
                  batch_size: int = 1) -> float:
    """Monte-Carlo GSNR of a zero-initialized linear probe on raw tokens.

    At zero weights the per-sample loss gradient is (1/2 - y) * feature
    (plus the matching bias coordinate), so the estimate is exact up to
    sampling error and scales with the square of the signal amplitude.
    """
    from . import diagnostics as dg

    rng = np.random.default_rng(seed)
    shift = (spec.semantic_amp * spec.semantic_pattern()
             + spec.artifact_amp * spec.artifact_pattern()).ravel()
    labels = rng.integers(0, 2, size=n_samples)
    feats = rng.normal(scale=spec.noise_sigma,
                       size=(n_samples, spec.n_tokens * spec.dim))
    feats[labels == 1] += shift
    resid = (0.5 - labels)[:, None]
    grads = np.concatenate([resid * feats, resid], axis=1)
    return dg.gsnr(grads, batch_size=batch_size)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    header = json.dumps({"spec": asdict(ds.spec), "split": ds.split,
                         "n": len(ds)}).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(ds.tokens.astype("<f8").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
            raise ValueError("bad magic")
        n = int.from_bytes(fh.read(4), "little")
        meta = json.loads(fh.read(n).decode())
        spec_d = meta["spec"]
        spec_d["artifact_channels"] = tuple(spec_d["artifact_channels"])
        spec = TaskSpec(**spec_d)
        count = meta["n"]
        body = np.frombuffer(fh.read(8 * count * spec.n_tokens * spec.dim),
                             dtype="<f8").reshape(count, spec.n_tokens, spec.dim).copy()
        labels = np.frombuffer(fh.read(count), dtype=np.uint8).copy()
    return Dataset(spec, meta["split"], body, labels)


def dump_csv(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample,label," + ",".join(
            f"t{t}c{c}" for t in range(ds.spec.n_tokens) for c in range(ds.spec.dim)) + "\n")
        for i in range(len(ds)):
            row = ",".join(repr(float(v)) for v in ds.tokens[i].ravel())
            fh.write(f"{i},{int(ds.labels[i])},{row}\n")
