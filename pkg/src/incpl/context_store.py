"""Candidate pool and in-context example selection.

The pool holds exactly one labeled representative per class. Context sets
are drawn from it without replacement, either freshly per test sample
(random strategy) or once per stream (definition strategy). Label-ablation
modes rewrite the drawn labels; the oracle and same-label modes peek at the
test sample's gold label and are therefore gated behind an explicit
ablation flag at the stream level.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import ImageSample
from .data import DatasetManifest, ImageStore
from .errors import ConfigurationError

LABEL_MODES = ("gold", "random", "same", "oracle", "none", "no-examples")
ORACLE_MODES = ("same", "oracle")
STRATEGIES = ("random", "definition")


@dataclass(frozen=True)
class PoolEntry:
    record_index: int
    class_index: int
    sample: ImageSample


@dataclass
class CandidatePool:
    entries: list[PoolEntry]
    seed: int

    @property
    def size(self) -> int:
        return len(self.entries)

    def record_indices(self) -> list[int]:
        return [e.record_index for e in self.entries]


@dataclass(frozen=True)
class ContextPair:
    sample: ImageSample
    label: int | None
    source_id: str


@dataclass
class ContextSet:
    pairs: list[ContextPair]
    strategy: str
    label_mode: str

    @property
    def size(self) -> int:
        return len(self.pairs)


@dataclass
class SelectionStrategy:
    kind: str
    fixed_set: ContextSet | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.kind!r}")


def build_pool(
    manifest: DatasetManifest,
    seed: int,
    class_to_index: dict[str, int] | None = None,
    store: ImageStore | None = None,
) -> CandidatePool:
    """One uniformly drawn labeled sample per class, seeded."""
    store = store or ImageStore()
    if class_to_index is None:
        class_to_index = {name: i for i, name in enumerate(manifest.class_list)}
    by_class: dict[str, list[int]] = {}
    for i, rec in enumerate(manifest.records):
        by_class.setdefault(rec.class_name, []).append(i)
    rng = np.random.default_rng(seed)
    entries = []
    for name, index in sorted(class_to_index.items(), key=lambda kv: kv[1]):
        candidates = by_class.get(name, [])
        if not candidates:
            raise ConfigurationError(f"class {name!r} has no labeled samples")
        rec_index = candidates[int(rng.integers(len(candidates)))]
        entries.append(
            PoolEntry(
                record_index=rec_index,
                class_index=index,
                sample=store.get(manifest.records[rec_index]),
            )
        )
    return CandidatePool(entries=entries, seed=seed)


def sample_context(pool: CandidatePool, n: int, strategy: SelectionStrategy, rng: np.random.Generator) -> ContextSet:
    """Draw N pool entries without replacement (or reuse the fixed set)."""
    if n == 0:
        return ContextSet(pairs=[], strategy=strategy.kind, label_mode="gold")
    if not 1 <= n <= pool.size:
        raise ConfigurationError(f"context size {n} out of range 1..{pool.size}")
    if strategy.kind == "definition":
        if strategy.fixed_set is None:
            strategy.fixed_set = _draw(pool, n, strategy.kind, rng)
        return ContextSet(
            pairs=list(strategy.fixed_set.pairs),
            strategy=strategy.kind,
            label_mode=strategy.fixed_set.label_mode,
        )
    return _draw(pool, n, strategy.kind, rng)


def _draw(pool: CandidatePool, n: int, kind: str, rng: np.random.Generator) -> ContextSet:
    picks = [int(i) for i in rng.choice(pool.size, size=n, replace=False)]
    pairs = [
        ContextPair(
            sample=pool.entries[i].sample,
            label=pool.entries[i].class_index,
            source_id=pool.entries[i].sample.id,
        )
        for i in picks
    ]
    return ContextSet(pairs=pairs, strategy=kind, label_mode="gold")


def apply_label_mode(
    cs: ContextSet,
    mode: str,
    test_gold: int | None,
    rng: np.random.Generator,
    n_classes: int,
    oracle_lookup=None,
) -> ContextSet:
    """Rewrite context labels (or the pairs themselves) per the ablation mode.

    ``oracle_lookup`` maps a class index to the labeled samples of that
    class; the oracle mode redraws the whole set from the test class.
    """
    if mode not in LABEL_MODES:
        raise ConfigurationError(f"label mode must be one of {LABEL_MODES}, got {mode!r}")
    if mode == "no-examples":
        return ContextSet(pairs=[], strategy=cs.strategy, label_mode=mode)
    if mode == "gold":
        return cs
    if mode == "none":
        pairs = [replace(p, label=None) for p in cs.pairs]
        return ContextSet(pairs=pairs, strategy=cs.strategy, label_mode=mode)
    if mode == "random":
        pairs = [replace(p, label=int(rng.integers(n_classes))) for p in cs.pairs]
        return ContextSet(pairs=pairs, strategy=cs.strategy, label_mode=mode)
    if test_gold is None:
        raise ConfigurationError(f"label mode {mode!r} requires the test sample's gold label")
    if mode == "same":
        pairs = [replace(p, label=test_gold) for p in cs.pairs]
        return ContextSet(pairs=pairs, strategy=cs.strategy, label_mode=mode)
    # oracle: replace pairs by labeled samples whose true class is the test class
    if oracle_lookup is None:
        raise ConfigurationError("oracle label mode requires a labeled-sample lookup")
    candidates = oracle_lookup(test_gold)
    if not candidates:
        raise ConfigurationError(f"no labeled samples available for oracle class {test_gold}")
    n = cs.size
    if len(candidates) >= n:
        chosen = [candidates[int(i)] for i in rng.choice(len(candidates), size=n, replace=False)]
    else:
        chosen = [candidates[int(rng.integers(len(candidates)))] for _ in range(n)]
    pairs = [ContextPair(sample=s, label=test_gold, source_id=s.id) for s in chosen]
    return ContextSet(pairs=pairs, strategy=cs.strategy, label_mode=mode)
