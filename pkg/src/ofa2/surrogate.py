"""Objective evaluation: accuracy predictor, latency lookup table, synthetic surrogate.

Every evaluator maps an ``(n, 46)`` gene array to an ``(n, 2)`` array of
``(top-1 error %, latency ms)``.  Accuracy is turned into error exactly once,
inside :meth:`PredictorEvaluator.evaluate_genes`; the search code only ever
sees minimisation objectives.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .genotype import (
    KERNEL_OPTIONS,
    KS,
    MAX_DEPTH,
    N_SLOTS,
    N_UNITS,
    R,
    RESOLUTION_OPTIONS,
    WIDTH_OPTIONS,
    W,
    Architecture,
    Genotype,
    active_mask,
    validate_genes,
)

FEATURE_WIDTH = N_SLOTS * (len(KERNEL_OPTIONS) + len(WIDTH_OPTIONS)) + len(RESOLUTION_OPTIONS)
DEFAULT_HIDDEN = (400, 400, 400)

# lookup from option value to its index; -1 marks illegal values
_K_IDX = np.full(8, -1)
_K_IDX[list(KERNEL_OPTIONS)] = np.arange(len(KERNEL_OPTIONS))
_W_IDX = np.full(7, -1)
_W_IDX[list(WIDTH_OPTIONS)] = np.arange(len(WIDTH_OPTIONS))


def _res_index(r: np.ndarray) -> np.ndarray:
    return (np.asarray(r) - RESOLUTION_OPTIONS[0]) // 4


class ConfigurationError(ValueError):
    """An evaluator was assembled from inconsistent parts."""


class EvaluationError(RuntimeError):
    """Evaluating one genotype of a batch failed."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"evaluation failed for genotype {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class ObjectiveVector:
    top1_error: float
    latency: float

    def __post_init__(self):
        if not (math.isfinite(self.top1_error) and math.isfinite(self.latency)):
            raise ValueError(f"objectives must be finite: {self}")
        if not 0.0 <= self.top1_error <= 100.0:
            raise ValueError(f"top1_error out of [0, 100]: {self.top1_error}")
        if self.latency < 0.0:
            raise ValueError(f"latency must be >= 0: {self.latency}")

    def as_tuple(self) -> tuple[float, float]:
        return (self.top1_error, self.latency)


def _as_gene_array(genotypes) -> np.ndarray:
    if isinstance(genotypes, Genotype):
        return genotypes.to_array()[None]
    if isinstance(genotypes, np.ndarray):
        return np.atleast_2d(genotypes).astype(np.int64, copy=False)
    rows = [g.to_array() if isinstance(g, Genotype) else validate_genes(g) for g in genotypes]
    if not rows:
        return np.empty((0, 2 * N_SLOTS + N_UNITS + 1), dtype=np.int64)
    return np.stack(rows)


def _arch_to_genes(arch: Architecture) -> np.ndarray:
    genes = np.zeros(2 * N_SLOTS + N_UNITS + 1, dtype=np.int64)
    genes[KS] = KERNEL_OPTIONS[0]
    genes[W] = WIDTH_OPTIONS[0]
    for u, unit in enumerate(arch.units):
        genes[2 * N_SLOTS + u] = unit.depth
        for s, (k, w) in enumerate(unit.layers):
            genes[u * MAX_DEPTH + s] = k
            genes[N_SLOTS + u * MAX_DEPTH + s] = w
    genes[R] = arch.resolution
    return genes


def encode_features_batch(genes: np.ndarray) -> np.ndarray:
    """One-hot features, ``(n, 145)``: 20 x (kernel[3] ++ width[3]) then resolution[25]."""
    genes = np.atleast_2d(genes)
    n = genes.shape[0]
    active = active_mask(genes)
    feats = np.zeros((n, N_SLOTS, 6))
    rows, slots = np.nonzero(active)
    feats[rows, slots, _K_IDX[genes[rows, slots]]] = 1.0
    feats[rows, slots, 3 + _W_IDX[genes[rows, N_SLOTS + slots]]] = 1.0
    res = np.zeros((n, len(RESOLUTION_OPTIONS)))
    res[np.arange(n), _res_index(genes[:, R])] = 1.0
    return np.concatenate([feats.reshape(n, -1), res], axis=1)


def encode_features(arch: Architecture | Genotype) -> np.ndarray:
    genes = arch.to_array() if isinstance(arch, Genotype) else _arch_to_genes(arch)
    return encode_features_batch(genes[None])[0]


class AccuracyPredictor:
    """Feed-forward ReLU network predicting top-1 accuracy (percent).

    ``weights[i]`` has shape ``(fan_in, fan_out)``; the last layer has a single
    output and no activation.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ConfigurationError("need one bias per weight matrix")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != b.shape[0]:
                raise ConfigurationError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ConfigurationError(
                    f"layer {i}: fan-in {w.shape[0]} != previous fan-out {self.weights[i - 1].shape[1]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {i} holds non-finite values")
        if self.weights[-1].shape[1] != 1:
            raise ConfigurationError("output layer must have a single unit")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.shape[1] != self.input_dim:
            raise ConfigurationError(
                f"feature width {h.shape[1]} does not match predictor input {self.input_dim}"
            )
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
        return h[:, 0]

    def __eq__(self, other):
        if not isinstance(other, AccuracyPredictor) or self.dims != other.dims:
            return NotImplemented if not isinstance(other, AccuracyPredictor) else False
        return all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights)) and all(
            np.array_equal(a, b) for a, b in zip(self.biases, other.biases)
        )

    @classmethod
    def constant(cls, value: float, hidden: Sequence[int] = DEFAULT_HIDDEN, input_dim: int = FEATURE_WIDTH):
        dims = [input_dim, *hidden, 1]
        weights = [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        biases[-1][0] = value
        return cls(weights, biases)

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        input_dim: int = FEATURE_WIDTH,
        output_bias: float = 75.0,
    ):
        dims = [input_dim, *hidden, 1]
        weights = [rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        biases = [rng.normal(0.0, 0.1, size=b) for b in dims[1:]]
        biases[-1][0] = output_bias
        return cls(weights, biases)

    @classmethod
    def additive(cls, hidden: Sequence[int] = DEFAULT_HIDDEN, base: float = 55.0):
        """A hand-wired network whose output is additive in the active layers.

        All features and the wired weights are non-negative, so the ReLUs act as
        identities along hidden unit 0 and the prediction is

            base + sum_active(0.5 + 0.15*k_idx + 0.2*w_idx) + 0.16*res_idx

        Useful as a deterministic stand-in when no trained weights are at hand.
        """
        dims = [FEATURE_WIDTH, *hidden, 1]
        weights = [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        first = weights[0]
        for s in range(N_SLOTS):
            for ki in range(3):
                first[6 * s + ki, 0] = 0.5 + 0.15 * ki
            for wi in range(3):
                first[6 * s + 3 + wi, 0] = 0.2 * wi
        first[6 * N_SLOTS :, 0] = 0.16 * np.arange(len(RESOLUTION_OPTIONS))
        for w in weights[1:]:
            w[0, 0] = 1.0
        biases[-1][0] = base
        return cls(weights, biases)


def predict_accuracy(p: AccuracyPredictor, g: Genotype) -> float:
    return float(p.forward(encode_features(g)[None])[0])


class LatencyTable:
    """Per-layer latency lookup keyed by ``(resolution, unit, slot, kernel, width)``.

    ``stem`` and ``head`` map a resolution to its fixed overhead in ms.
    """

    def __init__(
        self,
        entries: dict[tuple[int, int, int, int, int], float],
        stem: dict[int, float],
        head: dict[int, float],
    ):
        self.entries = {tuple(int(x) for x in k): float(v) for k, v in entries.items()}
        self.stem = {int(k): float(v) for k, v in stem.items()}
        self.head = {int(k): float(v) for k, v in head.items()}
        shape = (len(RESOLUTION_OPTIONS), N_UNITS, MAX_DEPTH, len(KERNEL_OPTIONS), len(WIDTH_OPTIONS))
        dense = np.full(shape, np.nan)
        for key, ms in self.entries.items():
            r, u, s, k, w = key
            if ms < 0 or not math.isfinite(ms):
                raise ConfigurationError(f"latency entry {key} must be finite and >= 0, got {ms}")
            if r not in RESOLUTION_OPTIONS or not (0 <= u < N_UNITS and 0 <= s < MAX_DEPTH):
                raise ConfigurationError(f"latency entry {key} is outside the search space")
            if k not in KERNEL_OPTIONS or w not in WIDTH_OPTIONS:
                raise ConfigurationError(f"latency entry {key} is outside the search space")
            dense[_res_index(r), u, s, _K_IDX[k], _W_IDX[w]] = ms
        overhead = np.full(len(RESOLUTION_OPTIONS), np.nan)
        for r in RESOLUTION_OPTIONS:
            if r in self.stem and r in self.head:
                overhead[_res_index(r)] = self.stem[r] + self.head[r]
        for name, table in (("stem", self.stem), ("head", self.head)):
            for r, ms in table.items():
                if ms < 0 or not math.isfinite(ms):
                    raise ConfigurationError(f"{name} overhead at r={r} must be finite and >= 0")
        self._dense = dense
        self._overhead = overhead

    def __eq__(self, other):
        if not isinstance(other, LatencyTable):
            return NotImplemented
        return (self.entries, self.stem, self.head) == (other.entries, other.stem, other.head)

    def lookup_genes(self, genes: np.ndarray) -> np.ndarray:
        genes = np.atleast_2d(genes)
        ri = _res_index(genes[:, R])
        unit = np.repeat(np.arange(N_UNITS), MAX_DEPTH)
        slot = np.tile(np.arange(MAX_DEPTH), N_UNITS)
        vals = self._dense[ri[:, None], unit[None, :], slot[None, :], _K_IDX[genes[:, KS]], _W_IDX[genes[:, W]]]
        active = active_mask(genes)
        missing = active & np.isnan(vals)
        over = self._overhead[ri]
        if missing.any() or np.isnan(over).any():
            self._raise_missing(genes, missing, over)
        return over + np.where(active, vals, 0.0).sum(axis=1)

    def _raise_missing(self, genes, missing, over):
        for i in range(genes.shape[0]):
            r = int(genes[i, R])
            if np.isnan(over[i]):
                part = "stem" if r not in self.stem else "head"
                err = LookupError(f"latency table has no {part} overhead for resolution {r}")
                raise EvaluationError(i, err)
            if missing[i].any():
                j = int(np.argmax(missing[i]))
                key = (r, j // MAX_DEPTH, j % MAX_DEPTH, int(genes[i, KS][j]), int(genes[i, W][j]))
                err = LookupError(f"latency table has no entry for (resolution, unit, slot, kernel, width) = {key}")
                raise EvaluationError(i, err)

    @classmethod
    def from_surrogate(cls, s: "SyntheticSurrogate") -> "LatencyTable":
        """Table reproducing the synthetic latency model layer by layer."""
        entries = {}
        for r in RESOLUTION_OPTIONS:
            scale = (r / 224.0) ** 2
            for u in range(N_UNITS):
                for slot in range(MAX_DEPTH):
                    for k in KERNEL_OPTIONS:
                        for w in WIDTH_OPTIONS:
                            entries[(r, u, slot, k, w)] = s.c * scale * k * k * w
        half = s.b / 2.0
        return cls(entries, {r: half for r in RESOLUTION_OPTIONS}, {r: half for r in RESOLUTION_OPTIONS})

    @classmethod
    def uniform(cls, ms: float = 1.0, overhead: float = 0.0) -> "LatencyTable":
        entries = {
            (r, u, slot, k, w): ms
            for r in RESOLUTION_OPTIONS
            for u in range(N_UNITS)
            for slot in range(MAX_DEPTH)
            for k in KERNEL_OPTIONS
            for w in WIDTH_OPTIONS
        }
        return cls(entries, {r: overhead for r in RESOLUTION_OPTIONS}, {r: 0.0 for r in RESOLUTION_OPTIONS})


def predict_latency(t: LatencyTable, g: Genotype) -> float:
    try:
        return float(t.lookup_genes(g.to_array()[None])[0])
    except EvaluationError as exc:
        raise exc.cause from None


@dataclass(frozen=True)
class SyntheticSurrogate:
    """Closed-form objectives over a scalar work score.

    ``work = (r/224)^2 * sum_active(kernel^2 * width)``,
    ``error = 100*exp(-a*work)``, ``latency = b + c*work``.
    Both objectives are strictly monotone in ``work``, in opposite directions.
    """

    a: float = 2.7e-4
    b: float = 5.0
    c: float = 0.01

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0 and self.b >= 0):
            raise ConfigurationError("synthetic surrogate needs a > 0, c > 0, b >= 0")

    def work(self, genes: np.ndarray) -> np.ndarray:
        genes = np.atleast_2d(genes)
        terms = genes[:, KS].astype(np.float64) ** 2 * genes[:, W]
        total = np.where(active_mask(genes), terms, 0.0).sum(axis=1)
        return (genes[:, R] / 224.0) ** 2 * total

    def objectives_from_work(self, work: np.ndarray) -> np.ndarray:
        work = np.asarray(work, dtype=np.float64)
        return np.stack([100.0 * np.exp(-self.a * work), self.b + self.c * work], axis=-1)


def synthetic_objectives(s: SyntheticSurrogate, g: Genotype) -> ObjectiveVector:
    err, lat = s.objectives_from_work(s.work(g.to_array()[None]))[0]
    return ObjectiveVector(float(err), float(lat))


class Evaluator(Protocol):
    def evaluate_genes(self, genes: np.ndarray) -> np.ndarray: ...

    def identity(self) -> dict: ...


class SyntheticEvaluator:
    def __init__(self, surrogate: SyntheticSurrogate | None = None):
        self.surrogate = surrogate or SyntheticSurrogate()

    def evaluate_genes(self, genes: np.ndarray) -> np.ndarray:
        s = self.surrogate
        return s.objectives_from_work(s.work(genes))

    def identity(self) -> dict:
        s = self.surrogate
        params = {"a": s.a, "b": s.b, "c": s.c}
        digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()
        return {"kind": "synthetic", "params": params, "digest": digest}


class PredictorEvaluator:
    """Accuracy predictor + latency table; error = 100 - accuracy, clipped to [0, 100]."""

    def __init__(self, predictor: AccuracyPredictor, table: LatencyTable, digests: dict | None = None):
        if predictor.input_dim != FEATURE_WIDTH:
            raise ConfigurationError(
                f"predictor expects {predictor.input_dim} features, encoding produces {FEATURE_WIDTH}"
            )
        self.predictor = predictor
        self.table = table
        self.digests = dict(digests or {})

    def evaluate_genes(self, genes: np.ndarray) -> np.ndarray:
        genes = np.atleast_2d(genes)
        acc = self.predictor.forward(encode_features_batch(genes))
        err = 100.0 - np.clip(acc, 0.0, 100.0)
        return np.stack([err, self.table.lookup_genes(genes)], axis=1)

    def identity(self) -> dict:
        return {"kind": "predictor", **self.digests}


def evaluate_genes(evaluator: Evaluator, genes: np.ndarray, workers: int = 1) -> np.ndarray:
    """Batch evaluation; with ``workers > 1`` chunks run on threads, order preserved."""
    genes = np.atleast_2d(genes)
    if genes.shape[0] == 0:
        return np.empty((0, 2))
    if workers <= 1 or genes.shape[0] < 2 * workers:
        return _checked(evaluator.evaluate_genes(genes), 0)
    bounds = np.linspace(0, genes.shape[0], workers + 1).astype(int)
    chunks = [(lo, genes[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def run(item):
        lo, part = item
        try:
            return _checked(evaluator.evaluate_genes(part), lo)
        except EvaluationError as exc:
            raise EvaluationError(exc.index + lo, exc.cause) from None

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(run, chunks)), axis=0)


def _checked(objs: np.ndarray, offset: int) -> np.ndarray:
    bad = ~np.all(np.isfinite(objs), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise EvaluationError(offset + i, ValueError(f"non-finite objectives {objs[i].tolist()}"))
    return objs


def evaluate_population(evaluator: Evaluator, genotypes, workers: int = 1) -> list[ObjectiveVector]:
    genes = _as_gene_array(genotypes)
    return [ObjectiveVector(float(e), float(l)) for e, l in evaluate_genes(evaluator, genes, workers)]
