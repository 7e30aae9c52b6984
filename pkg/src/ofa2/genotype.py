"""Once-for-All subnetwork encoding.

A genotype is a flat vector of 46 integer genes laid out as::

    [ks(20) | w(20) | d(5) | r(1)]

``ks`` and ``w`` are unit-major, slot-minor: gene ``ks[4*u + s]`` is the kernel
size of slot ``s`` in unit ``u``.  Only the first ``d[u]`` slots of a unit are
active; the remaining slots keep their values in the genotype but are ignored
when decoding.

Operators come in two flavours: scalar ones acting on :class:`Genotype`
values, and ``*_genes`` batch versions acting on ``(n, 46)`` integer arrays,
which is what the search loops use.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KERNEL_OPTIONS = (3, 5, 7)
WIDTH_OPTIONS = (3, 4, 6)
DEPTH_OPTIONS = (2, 3, 4)
RESOLUTION_OPTIONS = tuple(range(128, 225, 4))

N_UNITS = 5
MAX_DEPTH = 4
N_SLOTS = N_UNITS * MAX_DEPTH
N_GENES = 2 * N_SLOTS + N_UNITS + 1

KS = slice(0, N_SLOTS)
W = slice(N_SLOTS, 2 * N_SLOTS)
D = slice(2 * N_SLOTS, 2 * N_SLOTS + N_UNITS)
R = N_GENES - 1

# written into inactive slots by phenotype_key; never a legal gene value
_INACTIVE = 0


class GenotypeError(ValueError):
    """A gene vector is malformed or holds an illegal value."""

    def __init__(self, message: str, gene_index: int | None = None):
        super().__init__(message)
        self.gene_index = gene_index


def gene_name(index: int) -> str:
    """Human readable name of a gene position, e.g. ``ks[u2,s1]``."""
    if 0 <= index < N_SLOTS:
        return f"ks[u{index // MAX_DEPTH},s{index % MAX_DEPTH}]"
    if N_SLOTS <= index < 2 * N_SLOTS:
        i = index - N_SLOTS
        return f"w[u{i // MAX_DEPTH},s{i % MAX_DEPTH}]"
    if 2 * N_SLOTS <= index < R:
        return f"d[u{index - 2 * N_SLOTS}]"
    if index == R:
        return "r"
    raise IndexError(index)


def _table_options() -> tuple[tuple[int, ...], ...]:
    return (
        (KERNEL_OPTIONS,) * N_SLOTS
        + (WIDTH_OPTIONS,) * N_SLOTS
        + (DEPTH_OPTIONS,) * N_UNITS
        + (RESOLUTION_OPTIONS,)
    )


_TABLE = _table_options()


def validate_genes(values: Iterable[int]) -> np.ndarray:
    """Check a flat gene vector against the legal option sets.

    Returns the genes as an ``int64`` array of shape ``(46,)``.

    Raises:
        GenotypeError: wrong length, non-integer entry, or a value outside
            its option set. ``gene_index`` names the first offending gene.
    """
    genes = list(values)
    if len(genes) != N_GENES:
        raise GenotypeError(f"expected {N_GENES} genes, got {len(genes)}")
    out = np.empty(N_GENES, dtype=np.int64)
    for i, (v, opts) in enumerate(zip(genes, _TABLE)):
        if isinstance(v, (bool, np.bool_)) or int(v) != v:
            raise GenotypeError(f"gene {i} ({gene_name(i)}) is not an integer: {v!r}", i)
        if int(v) not in opts:
            raise GenotypeError(
                f"gene {i} ({gene_name(i)}) = {v!r} not in {list(opts)}", i
            )
        out[i] = int(v)
    return out


@dataclass(frozen=True)
class Genotype:
    """46-gene encoding of one subnetwork. Validated on construction."""

    ks: tuple[int, ...]
    w: tuple[int, ...]
    d: tuple[int, ...]
    r: int

    def __post_init__(self):
        for name, n in (("ks", N_SLOTS), ("w", N_SLOTS), ("d", N_UNITS)):
            vals = getattr(self, name)
            if len(vals) != n:
                raise GenotypeError(f"{name} must have {n} entries, got {len(vals)}")
        genes = validate_genes([*self.ks, *self.w, *self.d, self.r])
        object.__setattr__(self, "ks", tuple(int(x) for x in genes[KS]))
        object.__setattr__(self, "w", tuple(int(x) for x in genes[W]))
        object.__setattr__(self, "d", tuple(int(x) for x in genes[D]))
        object.__setattr__(self, "r", int(genes[R]))

    @classmethod
    def from_genes(cls, values: Iterable[int]) -> "Genotype":
        genes = validate_genes(values)
        return cls(tuple(genes[KS]), tuple(genes[W]), tuple(genes[D]), int(genes[R]))

    def to_array(self) -> np.ndarray:
        return np.array([*self.ks, *self.w, *self.d, self.r], dtype=np.int64)

    def to_list(self) -> list[int]:
        return [*self.ks, *self.w, *self.d, self.r]


@dataclass(frozen=True)
class UnitSpec:
    depth: int
    layers: tuple[tuple[int, int], ...]  # (kernel, width) per active layer

    def __post_init__(self):
        if len(self.layers) != self.depth:
            raise GenotypeError(f"unit depth {self.depth} but {len(self.layers)} layers")


@dataclass(frozen=True)
class Architecture:
    units: tuple[UnitSpec, ...]
    resolution: int

    @property
    def layers(self) -> list[tuple[int, int]]:
        return [layer for unit in self.units for layer in unit.layers]

    def summary(self) -> str:
        """Compact text form, e.g. ``r224|k3w3,k5w4|...``."""
        parts = [",".join(f"k{k}w{w}" for k, w in u.layers) for u in self.units]
        return f"r{self.resolution}|" + "|".join(parts)


@dataclass(frozen=True)
class OperatorConfig:
    mutation_rate: float = 0.10
    rng_seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError(f"mutation_rate must be in [0, 1], got {self.mutation_rate}")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


@dataclass(frozen=True)
class SearchSpace:
    """Per-gene option sets; each must be a non-empty subset of the full table.

    The full OFA space is :meth:`full`.  Restricted spaces (fixing some
    hyperparameters) are used for exhaustive verification runs.
    """

    options: tuple[tuple[int, ...], ...] = field(default_factory=_table_options)

    def __post_init__(self):
        if len(self.options) != N_GENES:
            raise GenotypeError(f"search space needs {N_GENES} option sets")
        for i, (opts, legal) in enumerate(zip(self.options, _TABLE)):
            if not opts or any(o not in legal for o in opts) or len(set(opts)) != len(opts):
                raise GenotypeError(f"bad option set for gene {i} ({gene_name(i)}): {opts}", i)
        width = max(len(o) for o in self.options)
        table = np.zeros((N_GENES, width), dtype=np.int64)
        for i, opts in enumerate(self.options):
            table[i, : len(opts)] = opts
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_sizes", np.array([len(o) for o in self.options]))

    @classmethod
    def full(cls) -> "SearchSpace":
        return cls()

    @classmethod
    def restricted(
        cls,
        kernel: Sequence[int] = KERNEL_OPTIONS,
        width: Sequence[int] = WIDTH_OPTIONS,
        depth: Sequence[int] = DEPTH_OPTIONS,
        resolution: Sequence[int] = RESOLUTION_OPTIONS,
    ) -> "SearchSpace":
        return cls(
            (tuple(kernel),) * N_SLOTS
            + (tuple(width),) * N_SLOTS
            + (tuple(depth),) * N_UNITS
            + (tuple(resolution),)
        )

    @classmethod
    def reduced(cls) -> "SearchSpace":
        """Depth 2 everywhere, width 3, resolution 224, kernels free (3**10 phenotypes)."""
        return cls.restricted(width=(3,), depth=(2,), resolution=(224,))

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    def contains(self, genes: Iterable[int]) -> bool:
        return all(int(v) in opts for v, opts in zip(genes, self.options))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` genotypes with every gene uniform over its option set."""
        idx = (rng.random((n, N_GENES)) * self._sizes).astype(np.int64)
        return np.take_along_axis(self._table[None, :, :], idx[:, :, None], axis=2)[:, :, 0]


FULL_SPACE = SearchSpace.full()


def random_genotype(rng: np.random.Generator, space: SearchSpace = FULL_SPACE) -> Genotype:
    return Genotype.from_genes(space.sample(rng, 1)[0])


def active_mask(genes: np.ndarray) -> np.ndarray:
    """Boolean ``(..., 20)`` mask of layer slots that survive decoding."""
    genes = np.asarray(genes)
    depth = genes[..., D]
    slot = np.arange(MAX_DEPTH)
    mask = slot[None, :] < depth[..., :, None]
    return mask.reshape(genes.shape[:-1] + (N_SLOTS,))


def decode(g: Genotype | Sequence[int]) -> Architecture:
    """Map a genotype to its architecture, discarding inactive slots."""
    genes = g.to_array() if isinstance(g, Genotype) else validate_genes(g)
    units = []
    for u in range(N_UNITS):
        depth = int(genes[D][u])
        base = u * MAX_DEPTH
        layers = tuple(
            (int(genes[KS][base + s]), int(genes[W][base + s])) for s in range(depth)
        )
        units.append(UnitSpec(depth, layers))
    return Architecture(tuple(units), int(genes[R]))


def canonical_genes(genes: np.ndarray) -> np.ndarray:
    """Copy of ``genes`` with inactive kernel/width slots overwritten by a sentinel."""
    out = np.array(genes, dtype=np.int64, copy=True)
    inactive = ~active_mask(out)
    out[..., KS][inactive] = _INACTIVE
    out[..., W][inactive] = _INACTIVE
    return out


def phenotype_key(g: Genotype | Sequence[int]) -> bytes:
    genes = g.to_array() if isinstance(g, Genotype) else np.asarray(g, dtype=np.int64)
    return canonical_genes(genes).astype("<i2").tobytes()


def phenotype_keys(genes: np.ndarray) -> list[bytes]:
    canon = canonical_genes(genes).astype("<i2")
    return [row.tobytes() for row in canon]


def mutate_genes(
    genes: np.ndarray, rate: float, rng: np.random.Generator, space: SearchSpace = FULL_SPACE
) -> np.ndarray:
    """Resample each gene with probability ``rate`` from its full option set."""
    genes = np.atleast_2d(genes)
    hit = rng.random(genes.shape) < rate
    fresh = space.sample(rng, genes.shape[0])
    return np.where(hit, fresh, genes)


def mutate(
    g: Genotype, cfg: OperatorConfig, rng: np.random.Generator, space: SearchSpace = FULL_SPACE
) -> Genotype:
    return Genotype.from_genes(mutate_genes(g.to_array()[None], cfg.mutation_rate, rng, space)[0])


def crossover_genes(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform crossover, row by row: each child gene comes from ``a`` or ``b`` with p=1/2."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    take_a = rng.random(a.shape) < 0.5
    return np.where(take_a, a, b)


def uniform_crossover(a: Genotype, b: Genotype, rng: np.random.Generator) -> Genotype:
    return Genotype.from_genes(crossover_genes(a.to_array()[None], b.to_array()[None], rng)[0])


def _unit_configs(space: SearchSpace, unit: int) -> list[tuple[int, tuple[int, ...], tuple[int, ...]]]:
    """Distinct (depth, ks[4], w[4]) phenotypes of one unit, inactive slots padded."""
    base = unit * MAX_DEPTH
    ks_opts = space.options[KS][base : base + MAX_DEPTH]
    w_opts = space.options[W][base : base + MAX_DEPTH]
    out = []
    for depth in space.options[D][unit]:
        pools = [ks_opts[s] for s in range(depth)] + [w_opts[s] for s in range(depth)]
        for combo in itertools.product(*pools):
            ks = combo[:depth] + tuple(ks_opts[s][0] for s in range(depth, MAX_DEPTH))
            w = combo[depth:] + tuple(w_opts[s][0] for s in range(depth, MAX_DEPTH))
            out.append((depth, ks, w))
    return out


def search_space_size(space: SearchSpace = FULL_SPACE) -> int:
    """Number of distinct architectures (phenotypes), as an exact integer."""
    total = len(space.options[R])
    for u in range(N_UNITS):
        base = u * MAX_DEPTH
        per_unit = 0
        for depth in space.options[D][u]:
            count = 1
            for s in range(depth):
                count *= len(space.options[KS][base + s]) * len(space.options[W][base + s])
            per_unit += count
        total *= per_unit
    return total


def enumerate_phenotypes(space: SearchSpace, limit: int = 5_000_000) -> np.ndarray:
    """One genotype per distinct phenotype of ``space``, as an ``(n, 46)`` array.

    Only sensible for small spaces; refuses to build more than ``limit`` rows.
    """
    n = search_space_size(space)
    if n > limit:
        raise ValueError(f"space has {n} phenotypes, more than limit={limit}")
    per_unit = []
    for u in range(N_UNITS):
        rows = [list(ks) + list(w) + [d] for d, ks, w in _unit_configs(space, u)]
        per_unit.append(np.array(rows, dtype=np.int64))
    res = np.array(space.options[R], dtype=np.int64)
    shape = [len(p) for p in per_unit] + [len(res)]
    grid = np.indices(shape).reshape(len(shape), -1)
    out = np.empty((grid.shape[1], N_GENES), dtype=np.int64)
    for u, table in enumerate(per_unit):
        rows = table[grid[u]]
        base = u * MAX_DEPTH
        out[:, base : base + MAX_DEPTH] = rows[:, :MAX_DEPTH]
        out[:, N_SLOTS + base : N_SLOTS + base + MAX_DEPTH] = rows[:, MAX_DEPTH : 2 * MAX_DEPTH]
        out[:, 2 * N_SLOTS + u] = rows[:, 2 * MAX_DEPTH]
    out[:, R] = res[grid[N_UNITS]]
    return out
