"""Committees of architectures: voting, latency aggregation and experiment grids.

Hard voting counts top-1 votes and breaks ties by recounting the tied
classes in each member's top-2 ... top-5 lists, finally deferring to the
tied voter with the largest size score.  Soft voting sums class
probabilities.  Both have a readable per-sample form (``hard_vote``,
``soft_vote``) and a vectorised form used for whole prediction sets.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .pareto import pareto_filter

log = logging.getLogger(__name__)

TOP_K = 5
MIN_MEMBERS, MAX_MEMBERS = 2, 8
LATENCY_MODES = ("sum", "max")
VOTINGS = ("hard", "soft")
OFA_THRESHOLDS = tuple(range(15, 56, 5))


class PredictionError(ValueError):
    """Malformed prediction data or committee specification."""


class CombinationError(ValueError):
    """Fewer distinct combinations exist than were requested."""


@dataclass(eq=False)
class PredictionSet:
    """Per-model, per-sample class scores plus ground truth.

    Exactly one encoding is stored: ``probs`` with shape
    ``(n_models, n_samples, n_classes)``, or ``top5_classes``/``top5_scores``
    with shape ``(n_models, n_samples, 5)``.  ``latencies`` and ``sizes`` are
    per model; ``sizes`` drive the last hard-vote tie-break.
    """

    labels: np.ndarray
    latencies: np.ndarray
    sizes: np.ndarray
    n_classes: int
    probs: np.ndarray | None = None
    top5_classes: np.ndarray | None = None
    top5_scores: np.ndarray | None = None
    _top5_cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.latencies = np.asarray(self.latencies, dtype=np.float64)
        self.sizes = np.asarray(self.sizes, dtype=np.float64)
        self.n_classes = int(self.n_classes)
        if self.n_classes < TOP_K:
            raise PredictionError(f"need at least {TOP_K} classes, got {self.n_classes}")
        if (self.probs is None) == (self.top5_classes is None):
            raise PredictionError("store either full probabilities or top-5 lists, not both")
        if self.labels.ndim != 1 or np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise PredictionError("labels must be a vector of class ids < n_classes")
        m = self.latencies.shape[0]
        if self.sizes.shape != (m,) or self.latencies.ndim != 1:
            raise PredictionError("latencies and sizes need one entry per model")
        if np.any(self.latencies < 0) or not np.all(np.isfinite(self.latencies)):
            raise PredictionError("latencies must be finite and >= 0")
        s = self.labels.shape[0]
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != (m, s, self.n_classes):
                raise PredictionError(f"probs shape {self.probs.shape} != {(m, s, self.n_classes)}")
            if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=2) - 1.0) > 1e-6):
                raise PredictionError("probability vectors must be non-negative and sum to 1 +- 1e-6")
        else:
            self.top5_classes = np.asarray(self.top5_classes, dtype=np.int64)
            self.top5_scores = np.asarray(self.top5_scores, dtype=np.float64)
            if self.top5_classes.shape != (m, s, TOP_K) or self.top5_scores.shape != (m, s, TOP_K):
                raise PredictionError(f"top-5 arrays must have shape {(m, s, TOP_K)}")
            _check_top5(self.top5_classes, self.top5_scores, self.n_classes)

    @property
    def n_models(self) -> int:
        return self.latencies.shape[0]

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def encoding(self) -> str:
        return "prob" if self.probs is not None else "top5"

    def top5(self) -> tuple[np.ndarray, np.ndarray]:
        """Top-5 classes and scores per (model, sample); ties rank the lower class first."""
        if self.top5_classes is not None:
            return self.top5_classes, self.top5_scores
        if self._top5_cache is None:
            order = np.argsort(-self.probs, axis=2, kind="stable")[:, :, :TOP_K]
            scores = np.take_along_axis(self.probs, order, axis=2)
            self._top5_cache = (order, scores)
        return self._top5_cache

    def top1(self) -> np.ndarray:
        return self.top5()[0][:, :, 0]

    def model_accuracy(self) -> np.ndarray:
        """Top-1 accuracy (percent) of every model."""
        return 100.0 * (self.top1() == self.labels[None, :]).mean(axis=1)

    def __eq__(self, other):
        if not isinstance(other, PredictionSet):
            return NotImplemented

        def same(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (
            self.n_classes == other.n_classes
            and same(self.labels, other.labels)
            and same(self.latencies, other.latencies)
            and same(self.sizes, other.sizes)
            and same(self.probs, other.probs)
            and same(self.top5_classes, other.top5_classes)
            and same(self.top5_scores, other.top5_scores)
        )


def _check_top5(classes: np.ndarray, scores: np.ndarray, n_classes: int) -> None:
    if np.any(classes < 0) or np.any(classes >= n_classes):
        raise PredictionError("top-5 class ids out of range")
    srt = np.sort(classes, axis=-1)
    if np.any(srt[..., 1:] == srt[..., :-1]):
        raise PredictionError("top-5 lists must hold 5 distinct classes")
    if np.any(scores[..., 1:] >= scores[..., :-1]):
        raise PredictionError("top-5 scores must be strictly decreasing")


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[int, ...]
    latency_mode: str = "sum"
    voting: str = "hard"

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(int(m) for m in self.members))
        if not MIN_MEMBERS <= len(self.members) <= MAX_MEMBERS:
            raise PredictionError(f"ensembles have {MIN_MEMBERS}..{MAX_MEMBERS} members, got {len(self.members)}")
        if len(set(self.members)) != len(self.members):
            raise PredictionError("ensemble members must be distinct")
        if self.latency_mode not in LATENCY_MODES:
            raise PredictionError(f"latency_mode must be one of {LATENCY_MODES}")
        if self.voting not in VOTINGS:
            raise PredictionError(f"voting must be one of {VOTINGS}")


@dataclass(frozen=True)
class EnsembleResult:
    spec: EnsembleSpec
    accuracy: float
    latency: float
    spec_id: str = ""


def _as_top5_list(entry) -> list[int]:
    out = []
    for item in entry:
        cls = item[0] if isinstance(item, (tuple, list)) else item
        if isinstance(cls, (bool, np.bool_)) or int(cls) != cls or cls < 0:
            raise PredictionError(f"bad class id in top-5 list: {item!r}")
        out.append(int(cls))
    if len(out) != TOP_K or len(set(out)) != TOP_K:
        raise PredictionError(f"top-5 list must hold 5 distinct classes: {entry!r}")
    return out


def hard_vote(top5_lists: Sequence[Sequence], size_scores: Sequence[float]) -> int:
    """Committee decision for one sample from each member's ranked top-5 list.

    Entries may be bare class ids or ``(class, score)`` pairs.
    """
    lists = [_as_top5_list(t) for t in top5_lists]
    if not lists or len(size_scores) != len(lists):
        raise PredictionError("need one size score per member")
    top1 = [t[0] for t in lists]
    votes = Counter(top1)
    most = max(votes.values())
    tied = sorted(c for c, v in votes.items() if v == most)
    if len(tied) == 1:
        return tied[0]
    for k in range(2, TOP_K + 1):
        counts = {c: sum(c in t[:k] for t in lists) for c in tied}
        best = max(counts.values())
        winners = [c for c in tied if counts[c] == best]
        if len(winners) == 1:
            return winners[0]
    voters = [j for j, c in enumerate(top1) if c in tied]
    biggest = max(voters, key=lambda j: (size_scores[j], -j))
    return top1[biggest]


def soft_vote(prob_vectors: Sequence[Sequence[float]]) -> int:
    """Argmax of the summed probability vectors; exact ties go to the lowest class."""
    vecs = [np.asarray(v, dtype=np.float64) for v in prob_vectors]
    if not vecs:
        raise PredictionError("soft vote needs at least one member")
    if any(v.shape != vecs[0].shape or v.ndim != 1 for v in vecs):
        raise PredictionError("probability vectors must share one length")
    return int(np.argmax(np.sum(vecs, axis=0)))


def hard_vote_batch(classes: np.ndarray, sizes: np.ndarray, n_classes: int) -> np.ndarray:
    """Vectorised :func:`hard_vote` over samples.

    ``classes`` has shape ``(members, samples, 5)``; returns ``(samples,)``.
    """
    m, s, _ = classes.shape
    rows = np.arange(s)
    counts = np.zeros((s, n_classes), dtype=np.int64)
    for j in range(m):
        counts[rows, classes[j, :, 0]] += 1
    most = counts.max(axis=1, keepdims=True)
    tied = counts == most
    decided = tied.sum(axis=1) == 1
    out = np.where(decided, np.argmax(counts, axis=1), -1)
    for k in range(1, TOP_K):
        if decided.all():
            break
        for j in range(m):
            counts[rows, classes[j, :, k]] += 1
        score = np.where(tied, counts, -1)
        best = score.max(axis=1, keepdims=True)
        winners = score == best
        unique = (winners.sum(axis=1) == 1) & ~decided
        out[unique] = np.argmax(winners[unique], axis=1)
        decided |= unique
    if not decided.all():
        top1 = classes[:, :, 0]  # (m, s)
        voted_tied = tied[rows[None, :], top1]  # (m, s)
        # largest size, ties to the lowest member index
        rank = np.argsort(np.argsort(-np.asarray(sizes, dtype=np.float64), kind="stable"), kind="stable")
        key = np.where(voted_tied, rank[:, None], m + 1)
        pick = np.argmin(key, axis=0)
        fallback = top1[pick, rows]
        out = np.where(decided, out, fallback)
    return out


def soft_vote_batch(probs: np.ndarray) -> np.ndarray:
    """Vectorised :func:`soft_vote`: ``(members, samples, classes)`` to ``(samples,)``."""
    return np.argmax(probs.sum(axis=0), axis=1)


def _soft_from_top5(classes: np.ndarray, scores: np.ndarray, n_classes: int) -> np.ndarray:
    m, s, _ = classes.shape
    total = np.zeros((s, n_classes))
    rows = np.arange(s)
    for j in range(m):
        for k in range(TOP_K):
            total[rows, classes[j, :, k]] += scores[j, :, k]
    return np.argmax(total, axis=1)


def ensemble_latency(latencies: Sequence[float], mode: str) -> float:
    lat = [float(x) for x in latencies]
    if not lat:
        raise PredictionError("ensemble has no members")
    if mode == "sum":
        return math.fsum(lat)
    if mode == "max":
        return max(lat)
    raise PredictionError(f"latency mode must be one of {LATENCY_MODES}, got {mode!r}")


def committee_decisions(preds: PredictionSet, members: Sequence[int], voting: str) -> np.ndarray:
    """Per-sample committee output. Repeated members are allowed here."""
    idx = np.asarray(members, dtype=np.int64)
    if idx.size == 0 or np.any(idx < 0) or np.any(idx >= preds.n_models):
        raise PredictionError(f"member indices {list(members)} invalid for {preds.n_models} models")
    if voting == "soft":
        if preds.probs is not None:
            return soft_vote_batch(preds.probs[idx])
        return _soft_from_top5(preds.top5_classes[idx], preds.top5_scores[idx], preds.n_classes)
    if voting == "hard":
        classes, _ = preds.top5()
        return hard_vote_batch(classes[idx], preds.sizes[idx], preds.n_classes)
    raise PredictionError(f"voting must be one of {VOTINGS}, got {voting!r}")


def committee_accuracy(preds: PredictionSet, members: Sequence[int], voting: str) -> float:
    return 100.0 * float(np.mean(committee_decisions(preds, members, voting) == preds.labels))


def evaluate_ensemble(spec: EnsembleSpec, preds: PredictionSet) -> EnsembleResult:
    acc = committee_accuracy(preds, spec.members, spec.voting)
    lat = ensemble_latency(preds.latencies[list(spec.members)], spec.latency_mode)
    return EnsembleResult(spec, acc, lat)


def sample_combinations(
    pool_size: int, ensemble_size: int, count: int = 43, rng: np.random.Generator | None = None
) -> list[tuple[int, ...]]:
    """``count`` distinct member sets, drawn uniformly without repeating a set."""
    rng = rng if rng is not None else np.random.default_rng()
    total = math.comb(pool_size, ensemble_size)
    if total < count:
        raise CombinationError(
            f"only {total} combinations of {ensemble_size} from a pool of {pool_size}, need {count}"
        )
    if total <= max(20 * count, 5000):
        every = list(itertools.combinations(range(pool_size), ensemble_size))
        pick = rng.choice(total, size=count, replace=False)
        return [every[i] for i in pick]
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < count:
        combo = tuple(sorted(rng.choice(pool_size, size=ensemble_size, replace=False).tolist()))
        if combo not in seen:
            seen.add(combo)
            out.append(combo)
    return out


def mimic_ofa_subset(
    latencies: Sequence[float], thresholds: Iterable[float] = OFA_THRESHOLDS
) -> list[int | None]:
    """For each threshold, the highest-latency member at or below it (``None`` if none).

    ``latencies`` must be sorted ascending (index 0 is the fastest model).
    """
    lat = np.asarray(latencies, dtype=np.float64)
    if lat.size == 0:
        raise PredictionError("cannot pick from an empty front")
    if np.any(np.diff(lat) < 0):
        raise PredictionError("front must be sorted by ascending latency")
    out: list[int | None] = []
    for t in thresholds:
        i = int(np.searchsorted(lat, t, side="right")) - 1
        out.append(i if i >= 0 else None)
    if all(i is None for i in out):
        log.warning("every model is slower than every threshold; subset is empty")
    return out


def synth_predictions(
    targets: Sequence[float],
    n_samples: int,
    n_classes: int,
    rho: float,
    rng: np.random.Generator,
    latencies: Sequence[float] | None = None,
    sizes: Sequence[float] | None = None,
    margin: float = 1.0,
) -> PredictionSet:
    """Synthetic softmax outputs with prescribed accuracies and correlation.

    A one-factor model: sample ``s`` has a shared difficulty ``z_s`` and each
    model draws ``u = sqrt(rho)*z_s + sqrt(1-rho)*eps``.  Model ``m`` is right
    on exactly ``round(target_m * n / 100)`` samples, those with the smallest
    ``u``.  A wrong model always answers the sample's confuser class, and the
    label/confuser pair occupies the top two ranks either way, so an equal
    split between them has to be settled further down the cascade.
    """
    acc = np.asarray(targets, dtype=np.float64)
    chance = 100.0 / n_classes
    if n_classes < TOP_K:
        raise PredictionError(f"need at least {TOP_K} classes")
    if np.any(acc <= chance) or np.any(acc >= 100.0):
        raise PredictionError(f"target accuracies must lie in ({chance:g}, 100)")
    if not 0.0 <= rho <= 1.0:
        raise PredictionError("rho must be in [0, 1]")
    m = acc.size
    lat = np.zeros(m) if latencies is None else np.asarray(latencies, dtype=np.float64)
    size = lat.copy() if sizes is None else np.asarray(sizes, dtype=np.float64)

    labels = rng.integers(n_classes, size=n_samples)
    confuser = (labels + rng.integers(1, n_classes, size=n_samples)) % n_classes
    shared_u = rng.standard_normal(n_samples)
    own_u = rng.standard_normal((m, n_samples))
    u = math.sqrt(rho) * shared_u[None, :] + math.sqrt(1.0 - rho) * own_u
    n_right = np.rint(acc / 100.0 * n_samples).astype(np.int64)
    order = np.argsort(u, axis=1, kind="stable")
    correct = np.zeros((m, n_samples), dtype=bool)
    for j in range(m):
        correct[j, order[j, : n_right[j]]] = True

    shared_logits = rng.standard_normal((n_samples, n_classes))
    own_logits = rng.standard_normal((m, n_samples, n_classes))
    logits = math.sqrt(rho) * shared_logits[None] + math.sqrt(1.0 - rho) * own_logits
    top = np.where(correct, labels[None, :], confuser[None, :])
    second = np.where(correct, confuser[None, :], labels[None, :])
    peak = logits.max(axis=2)
    jj, ss = np.meshgrid(np.arange(m), np.arange(n_samples), indexing="ij")
    logits[jj, ss, top] = peak + 2.0 * margin
    logits[jj, ss, second] = peak + margin
    logits -= logits.max(axis=2, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=2, keepdims=True)
    return PredictionSet(labels=labels, latencies=lat, sizes=size, n_classes=n_classes, probs=probs)


@dataclass
class ExperimentResult:
    results: list[EnsembleResult]
    nondominated: list[bool]
    errors: dict[int, str]

    def slice(self, mode: str, voting: str) -> list[EnsembleResult]:
        return [r for r in self.results if r.spec.latency_mode == mode and r.spec.voting == voting]

    def front(self, mode: str, voting: str) -> list[EnsembleResult]:
        return [
            r
            for r, nd in zip(self.results, self.nondominated)
            if nd and r.spec.latency_mode == mode and r.spec.voting == voting
        ]


def ensemble_experiment(
    preds: PredictionSet,
    sizes: Iterable[int] = range(2, 9),
    count: int = 43,
    modes: Sequence[str] = LATENCY_MODES,
    votings: Sequence[str] = VOTINGS,
    rng: np.random.Generator | None = None,
) -> ExperimentResult:
    """Full grid: sizes x sampled combinations x latency modes x voting schemes.

    Combinations are drawn once per size and shared by every slice.  A size
    whose combinations cannot be drawn is reported in ``errors`` and skipped.
    """
    rng = rng if rng is not None else np.random.default_rng()
    combos: dict[int, list[tuple[int, ...]]] = {}
    errors: dict[int, str] = {}
    for size in sizes:
        try:
            if not MIN_MEMBERS <= size <= MAX_MEMBERS:
                raise PredictionError(f"ensemble size {size} outside {MIN_MEMBERS}..{MAX_MEMBERS}")
            combos[size] = sample_combinations(preds.n_models, size, count, rng)
        except (CombinationError, PredictionError) as exc:
            errors[size] = str(exc)
            log.warning("skipping ensemble size %d: %s", size, exc)

    accuracy: dict[tuple[str, tuple[int, ...]], float] = {}
    for voting in votings:
        for members_list in combos.values():
            for members in members_list:
                accuracy[(voting, members)] = committee_accuracy(preds, members, voting)

    results: list[EnsembleResult] = []
    nondominated: list[bool] = []
    for mode in modes:
        for voting in votings:
            slice_results = []
            for size, members_list in combos.items():
                for i, members in enumerate(members_list):
                    spec = EnsembleSpec(members, mode, voting)
                    lat = ensemble_latency(preds.latencies[list(members)], mode)
                    slice_results.append(
                        EnsembleResult(spec, accuracy[(voting, members)], lat, f"{mode}-{voting}-n{size}-{i:02d}")
                    )
            pts = [(100.0 - r.accuracy, r.latency) for r in slice_results]
            keep = set(pareto_filter(pts)) if pts else set()
            results.extend(slice_results)
            nondominated.extend(i in keep for i in range(len(slice_results)))
    return ExperimentResult(results, nondominated, errors)
