"""Deterministic synthetic skeleton datasets with controlled heterogeneity.

Every client owns a disjoint label block, a private kinematic tree (a rewired
copy of the canonical skeleton), and a dataset scale. Each class is a fixed
motion archetype: per-joint sinusoids propagated along the client's tree, so
joint correlations encode the client's topology. Samples of a class differ by
a random global time shift and additive Gaussian noise, both drawn from seeded
streams, which makes generation a pure function of the spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .topology import SkeletonGraph

Array = np.ndarray

# Sub-stream tags so train/test/topology randomness never overlaps.
_TAG_ARCHETYPE = 101
_TAG_TRAIN = 102
_TAG_TEST = 103
_TAG_REWIRE = 104

_CACHE_MAGIC = "fedskel-data"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class MotionArchetype:
    class_id: int
    amplitude: Array  # [V, C]
    frequency: Array  # [V, C], positive
    phase: Array  # [V, C]
    sigma: float


@dataclass(frozen=True)
class ClientDatasetSpec:
    client_id: int
    labels: tuple[int, ...]
    samples_per_class: int
    parents: tuple[int, ...]  # private kinematic tree, -1 marks the root
    seed: int
    sigma: float = 0.05
    frames: int = 50
    channels: int = 3
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.samples_per_class < 2:
            raise ConfigError("need at least 2 samples per class for a train/test split")
        if sum(1 for p in self.parents if p < 0) != 1:
            raise ConfigError("kinematic tree must have exactly one root")

    @property
    def joints(self) -> int:
        return len(self.parents)

    @property
    def total_samples(self) -> int:
        return self.samples_per_class * len(self.labels)

    def spec_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass
class ClientData:
    train_x: Array  # [n, C, T, V] float32
    train_y: Array  # [n] int64, global class ids
    test_x: Array
    test_y: Array


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _tree_order(parents: tuple[int, ...]) -> list[int]:
    """Joints ordered so every joint appears after its parent."""
    order: list[int] = []
    placed = [False] * len(parents)
    pending = list(range(len(parents)))
    while pending:
        rest = []
        for j in pending:
            p = parents[j]
            if p < 0 or placed[p]:
                order.append(j)
                placed[j] = True
            else:
                rest.append(j)
        if len(rest) == len(pending):
            raise ConfigError("kinematic tree contains a cycle")
        pending = rest
    return order


# How strongly a joint rides on its tree parent's trajectory.
_PROPAGATION = 0.5


def class_archetype(spec: ClientDatasetSpec, class_id: int) -> MotionArchetype:
    """Amplitudes and frequencies come from a client-wide bank shared by every
    class; what distinguishes a class is its per-joint phase-lag pattern. The
    lags accumulate along the kinematic tree, so class identity lives in the
    phase relations between connected joints rather than in any single joint's
    waveform."""
    bank = _rng(spec.seed, spec.client_id, _TAG_ARCHETYPE)
    v, c = spec.joints, spec.channels
    amplitude = bank.uniform(0.5, 1.0, size=(v, c))
    # One base frequency per channel, shared by all joints and classes.
    frequency = np.broadcast_to(bank.uniform(1.0, 2.5, size=(1, c)), (v, c)).copy()
    rng = _rng(spec.seed, spec.client_id, class_id, _TAG_ARCHETYPE)
    return MotionArchetype(
        class_id=class_id,
        amplitude=amplitude,
        frequency=frequency,
        phase=rng.uniform(0.0, 2.0 * np.pi, size=(v, c)),
        sigma=spec.sigma,
    )


def _base_trajectory(
    spec: ClientDatasetSpec, arch: MotionArchetype, shift: Array | None = None
) -> Array:
    """Class trajectory [C, T, V]: each joint rides on its tree parent.

    `shift` is an optional per-channel phase offset; because every joint in a
    channel oscillates at the same base frequency, shifting the phase is a
    global time shift that preserves all joint-to-joint phase relations.
    """
    t = np.arange(spec.frames, dtype=np.float64)
    if shift is None:
        shift = np.zeros(spec.channels)
    traj = np.zeros((spec.channels, spec.frames, spec.joints))
    lag = np.zeros((spec.joints, spec.channels))
    for j in _tree_order(spec.parents):
        p = spec.parents[j]
        lag[j] = arch.phase[j] if p < 0 else lag[p] + arch.phase[j]
        own = arch.amplitude[j][:, None] * np.sin(
            2.0 * np.pi * arch.frequency[j][:, None] * t[None, :] / spec.frames
            + lag[j][:, None]
            + shift[:, None]
        )
        traj[:, :, j] = own if p < 0 else _PROPAGATION * traj[:, :, p] + own
    return traj


def _normalize(x: Array) -> Array:
    x = x - x.mean()
    peak = np.abs(x).max()
    if peak > 3.0:
        x = x * (3.0 / peak)
    return x.astype(np.float32)


def _sample_block(
    spec: ClientDatasetSpec, arch: MotionArchetype, count: int, rng: np.random.Generator
) -> Array:
    """Draw `count` samples: each gets a random global time shift (uniform
    per-channel phase) and additive Gaussian noise, then normalization. The
    time shift erases absolute phase, so only phase relations along the tree
    remain class-informative."""
    out = np.empty((count, spec.channels, spec.frames, spec.joints), dtype=np.float32)
    for i in range(count):
        shift = rng.uniform(0.0, 2.0 * np.pi, size=spec.channels)
        base = _base_trajectory(spec, arch, shift)
        noisy = base + rng.normal(0.0, spec.sigma, size=base.shape)
        out[i] = _normalize(noisy)
    return out


def generate(spec: ClientDatasetSpec) -> ClientData:
    """Materialize a client dataset; pure function of the spec."""
    n_train = int(round(spec.train_fraction * spec.samples_per_class))
    n_test = spec.samples_per_class - n_train
    if n_train < 1 or n_test < 1:
        raise ConfigError(
            f"train/test split of {spec.samples_per_class} samples per class is degenerate"
        )
    train_x, train_y, test_x, test_y = [], [], [], []
    for class_id in spec.labels:
        arch = class_archetype(spec, class_id)
        train_x.append(
            _sample_block(spec, arch, n_train, _rng(spec.seed, spec.client_id, class_id, _TAG_TRAIN))
        )
        test_x.append(
            _sample_block(spec, arch, n_test, _rng(spec.seed, spec.client_id, class_id, _TAG_TEST))
        )
        train_y.append(np.full(n_train, class_id, dtype=np.int64))
        test_y.append(np.full(n_test, class_id, dtype=np.int64))
    return ClientData(
        train_x=np.concatenate(train_x),
        train_y=np.concatenate(train_y),
        test_x=np.concatenate(test_x),
        test_y=np.concatenate(test_y),
    )


# ---------------------------------------------------------------------------
# Federation suites
# ---------------------------------------------------------------------------

def rewire_tree(parents: list[int], count: int, rng: np.random.Generator) -> list[int]:
    """Reassign `count` joints to new parents, keeping the tree acyclic."""
    parents = list(parents)
    root = parents.index(-1)
    n = len(parents)
    for _ in range(count):
        joint = int(rng.integers(0, n))
        while joint == root:
            joint = int(rng.integers(0, n))
        # A joint may not be grafted under its own subtree.
        subtree = {joint}
        changed = True
        while changed:
            changed = False
            for j in range(n):
                if j not in subtree and parents[j] in subtree:
                    subtree.add(j)
                    changed = True
        candidates = [j for j in range(n) if j not in subtree and j != parents[joint]]
        if not candidates:
            continue
        parents[joint] = candidates[int(rng.integers(0, len(candidates)))]
    return parents


def make_federation_suite(
    n_clients: int,
    scale_profile: str,
    seed: int,
    *,
    graph: SkeletonGraph,
    base_samples: int = 400,
    classes_per_client: int = 10,
    sigma: float = 0.05,
    rewire_edges: int = 4,
    frames: int = 50,
    channels: int = 3,
    include_unseen: bool = False,
) -> list[ClientDatasetSpec]:
    """Client specs with disjoint label blocks, private trees, and a scale
    profile: `balanced` gives every client `base_samples`, `skewed` gives
    client i a total of base_samples * 2^(n-1-i) (largest client first).

    With include_unseen an extra spec is appended (base scale, its own label
    block and tree); it is meant to be held out of the federation.
    """
    if n_clients < 2:
        raise ConfigError(f"need at least 2 clients, got {n_clients}")
    if scale_profile not in ("balanced", "skewed"):
        raise ConfigError(f"unknown scale profile '{scale_profile}'")
    if base_samples % classes_per_client != 0:
        raise ConfigError(
            f"base_samples {base_samples} must divide evenly into "
            f"{classes_per_client} classes"
        )
    canonical = graph.spanning_tree_parents()
    specs: list[ClientDatasetSpec] = []
    total_specs = n_clients + (1 if include_unseen else 0)
    for i in range(total_specs):
        factor = 1 if (scale_profile == "balanced" or i >= n_clients) else 2 ** (n_clients - 1 - i)
        parents = rewire_tree(canonical, rewire_edges, _rng(seed, i, _TAG_REWIRE))
        specs.append(
            ClientDatasetSpec(
                client_id=i,
                labels=tuple(range(i * classes_per_client, (i + 1) * classes_per_client)),
                samples_per_class=(base_samples * factor) // classes_per_client,
                parents=tuple(parents),
                seed=seed,
                sigma=sigma,
                frames=frames,
                channels=channels,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# On-disk cache
# ---------------------------------------------------------------------------

def save_cache(path: Path, spec: ClientDatasetSpec, data: ClientData) -> None:
    """Header line (format, spec hash, shapes) followed by raw little-endian
    float32 sequences and int32 labels, train then test."""
    header = {
        "format": _CACHE_MAGIC,
        "version": _CACHE_VERSION,
        "spec_hash": spec.spec_hash(),
        "train_shape": list(data.train_x.shape),
        "test_shape": list(data.test_x.shape),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(data.train_x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.train_y, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(data.test_x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.test_y, dtype="<i4").tobytes())


def load_cache(path: Path, spec: ClientDatasetSpec) -> ClientData:
    """Load a cache file; a spec-hash mismatch means the cache is stale."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt cache header in {path}") from exc
        if header.get("format") != _CACHE_MAGIC or header.get("version") != _CACHE_VERSION:
            raise DataError(f"unrecognized cache format in {path}")
        if header["spec_hash"] != spec.spec_hash():
            raise DataError(f"stale cache {path}: spec hash mismatch")
        train_shape = tuple(header["train_shape"])
        test_shape = tuple(header["test_shape"])
        n_train = int(np.prod(train_shape))
        n_test = int(np.prod(test_shape))
        train_x = np.frombuffer(fh.read(4 * n_train), dtype="<f4").reshape(train_shape)
        train_y = np.frombuffer(fh.read(4 * train_shape[0]), dtype="<i4").astype(np.int64)
        test_x = np.frombuffer(fh.read(4 * n_test), dtype="<f4").reshape(test_shape)
        test_y = np.frombuffer(fh.read(4 * test_shape[0]), dtype="<i4").astype(np.int64)
    return ClientData(
        train_x=train_x.astype(np.float32),
        train_y=train_y,
        test_x=test_x.astype(np.float32),
        test_y=test_y,
    )
