"""On-disk formats: search results, fronts, latency tables, predictors, prediction sets, CSV.

Every file carries a format version; readers reject an unknown major
version.  Floats are written with ``repr`` so they read back bit-exact.
Writers go through a temporary file and an atomic rename.  The byte-level
layouts are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ensemble import ExperimentResult, PredictionSet
from .genotype import Genotype, GenotypeError, decode, phenotype_key
from .pareto import dominates
from .search import Individual, RunManifest, SearchConfig, SearchResult, run_search
from .surrogate import AccuracyPredictor, ConfigurationError, Evaluator, LatencyTable, ObjectiveVector

FORMAT_VERSION = "1.0"

__all__ = [
    "FORMAT_VERSION",
    "RunManifest",
    "PersistenceError",
    "FormatVersionError",
    "DigestMismatchError",
    "MalformedRecordError",
    "PersistenceIOError",
]


class PersistenceError(Exception):
    """Base class for read/write failures."""


class FormatVersionError(PersistenceError):
    """The file was written by an incompatible format major version."""


class DigestMismatchError(PersistenceError):
    """Stored checksum or evaluator digest does not match the content."""


class MalformedRecordError(PersistenceError):
    """The file is truncated or a record does not parse."""


class PersistenceIOError(PersistenceError):
    """The filesystem refused a read or write."""

    def __init__(self, path, cause: OSError):
        super().__init__(f"{path}: {cause}")
        self.path = str(path)


def file_digest(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise PersistenceIOError(path, exc) from exc


def _write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise PersistenceIOError(path, exc) from exc


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceIOError(path, exc) from exc
    except UnicodeDecodeError as exc:
        raise MalformedRecordError(f"{path}: not UTF-8 text") from exc


def _check_version(found, path) -> None:
    if not isinstance(found, str) or "." not in found:
        raise MalformedRecordError(f"{path}: missing or bad format_version {found!r}")
    if found.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise FormatVersionError(f"{path}: format version {found} not readable (expected {FORMAT_VERSION})")


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _dump_json(kind: str, payload: dict) -> str:
    body = {"format": kind, "format_version": FORMAT_VERSION, **payload}
    body["checksum"] = hashlib.sha256(_canonical(body).encode()).hexdigest()
    return json.dumps(body, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _load_json(kind: str, path) -> dict:
    text = _read_text(path)
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc
    if not isinstance(body, dict) or body.get("format") != kind:
        raise MalformedRecordError(f"{path}: not a {kind} file")
    _check_version(body.get("format_version"), path)
    stored = body.pop("checksum", None)
    if stored != hashlib.sha256(_canonical(body).encode()).hexdigest():
        raise DigestMismatchError(f"{path}: checksum does not match content")
    return body


# -- individuals ------------------------------------------------------------


def _individual_record(ind: Individual, detailed: bool) -> dict:
    rec = {"genes": ind.genotype.to_list(), "objectives": list(ind.objectives.as_tuple())}
    if detailed:
        rec["architecture"] = decode(ind.genotype).summary()
        rec["phenotype_key"] = phenotype_key(ind.genotype).hex()
    return rec


def _individual_from(rec, where: str) -> Individual:
    try:
        g = Genotype.from_genes(rec["genes"])
        err, lat = rec["objectives"]
        ind = Individual(g, ObjectiveVector(float(err), float(lat)))
    except (KeyError, TypeError, ValueError, GenotypeError) as exc:
        raise MalformedRecordError(f"{where}: bad individual record: {exc}") from exc
    if "phenotype_key" in rec and rec["phenotype_key"] != phenotype_key(g).hex():
        raise DigestMismatchError(f"{where}: phenotype key does not match genes")
    return ind


# -- search results ---------------------------------------------------------


def save_result(result: SearchResult, path) -> None:
    payload = {
        "manifest": vars(result.manifest).copy(),
        "population": [_individual_record(i, False) for i in result.population],
        "front": [_individual_record(i, True) for i in result.front],
        "hv_history": list(result.hv_history),
        "front_history": None
        if result.front_history is None
        else [f.tolist() for f in result.front_history],
    }
    _write_text(path, _dump_json("ofa2-search-result", payload))


def load_result(path) -> SearchResult:
    body = _load_json("ofa2-search-result", path)
    try:
        manifest = RunManifest(**body["manifest"])
        population = [_individual_from(r, str(path)) for r in body["population"]]
        front = [_individual_from(r, str(path)) for r in body["front"]]
        hv = [float(x) for x in body["hv_history"]]
        hist = body["front_history"]
        history = None if hist is None else [np.asarray(f, dtype=np.float64).reshape(-1, 2) for f in hist]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc
    return SearchResult(population, front, hv, manifest, history)


def replay(manifest: RunManifest, evaluator: Evaluator) -> SearchResult:
    """Re-run a search from its manifest; refuses a different evaluator."""
    if evaluator.identity() != manifest.evaluator:
        raise DigestMismatchError("evaluator identity differs from the one recorded in the manifest")
    return run_search(SearchConfig.from_dict(manifest.config), evaluator)


# -- fronts and pools -------------------------------------------------------


def save_front(individuals: Sequence[Individual], path, kind: str = "front") -> None:
    """Write a front (pairwise non-dominated, unique phenotypes) or a free-form pool."""
    if kind not in ("front", "pool"):
        raise ValueError("kind must be 'front' or 'pool'")
    if kind == "front":
        _check_front(individuals, str(path))
    payload = {"kind": kind, "individuals": [_individual_record(i, True) for i in individuals]}
    _write_text(path, _dump_json("ofa2-front", payload))


def load_front(path) -> list[Individual]:
    body = _load_json("ofa2-front", path)
    try:
        kind = body["kind"]
        inds = [_individual_from(r, str(path)) for r in body["individuals"]]
    except (KeyError, TypeError) as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc
    if kind == "front":
        _check_front(inds, str(path))
    return inds


def _check_front(individuals: Sequence[Individual], where: str) -> None:
    keys = [phenotype_key(i.genotype) for i in individuals]
    if len(set(keys)) != len(keys):
        raise MalformedRecordError(f"{where}: front has repeated phenotypes")
    objs = [i.objectives.as_tuple() for i in individuals]
    for a in objs:
        for b in objs:
            if dominates(a, b):
                raise MalformedRecordError(f"{where}: front member {b} is dominated by {a}")


# -- latency tables ---------------------------------------------------------

_TABLE_HEADER = "# ofa2 latency table"


def save_latency_table(table: LatencyTable, path) -> None:
    lines = [_TABLE_HEADER, f"format_version {FORMAT_VERSION}"]
    for r in sorted(table.stem):
        lines.append(f"stem {r} {table.stem[r]!r}")
    for r in sorted(table.head):
        lines.append(f"head {r} {table.head[r]!r}")
    for key in sorted(table.entries):
        lines.append(" ".join(str(x) for x in key) + f" {table.entries[key]!r}")
    _write_text(path, "\n".join(lines) + "\n")


def load_latency_table(path) -> LatencyTable:
    entries, stem, head = {}, {}, {}
    version = None
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "format_version":
                version = parts[1]
                _check_version(version, path)
            elif parts[0] in ("stem", "head") and len(parts) == 3:
                (stem if parts[0] == "stem" else head)[int(parts[1])] = float(parts[2])
            elif len(parts) == 6:
                key = tuple(int(x) for x in parts[:5])
                if key in entries:
                    raise ValueError(f"duplicate key {key}")
                entries[key] = float(parts[5])
            else:
                raise ValueError(f"expected 6 fields, got {len(parts)}")
        except (ValueError, IndexError) as exc:
            raise MalformedRecordError(f"{path}:{lineno}: {exc}") from exc
    if version is None:
        raise MalformedRecordError(f"{path}: no format_version record")
    try:
        return LatencyTable(entries, stem, head)
    except ConfigurationError as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc


# -- accuracy predictors ----------------------------------------------------


def _row(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_predictor(p: AccuracyPredictor, path) -> None:
    buf = io.StringIO()
    buf.write(f"ofa2-predictor {FORMAT_VERSION}\n")
    buf.write("dims " + " ".join(str(d) for d in p.dims) + "\n")
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        buf.write(f"weight {i} {w.shape[0]} {w.shape[1]}\n")
        for row in w.tolist():
            buf.write(_row(row) + "\n")
        buf.write(f"bias {i} {b.shape[0]}\n")
        buf.write(_row(b.tolist()) + "\n")
    _write_text(path, buf.getvalue())


def load_predictor(path) -> AccuracyPredictor:
    lines = _read_text(path).splitlines()
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise MalformedRecordError(f"{path}: unexpected end of file")
        pos += 1
        return lines[pos - 1]

    def floats(line: str, n: int) -> list[float]:
        vals = line.split()
        if len(vals) != n:
            raise MalformedRecordError(f"{path}:{pos}: expected {n} values, got {len(vals)}")
        try:
            return [float(v) for v in vals]
        except ValueError as exc:
            raise MalformedRecordError(f"{path}:{pos}: {exc}") from exc

    head = take().split()
    if len(head) != 2 or head[0] != "ofa2-predictor":
        raise MalformedRecordError(f"{path}: not a predictor file")
    _check_version(head[1], path)
    dims_line = take().split()
    try:
        if dims_line[0] != "dims":
            raise ValueError("missing dims record")
        dims = [int(x) for x in dims_line[1:]]
    except (ValueError, IndexError) as exc:
        raise MalformedRecordError(f"{path}:2: {exc}") from exc
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if take().split() != ["weight", str(i), str(fan_in), str(fan_out)]:
            raise MalformedRecordError(f"{path}:{pos}: expected weight header for layer {i}")
        weights.append(np.array([floats(take(), fan_out) for _ in range(fan_in)]).reshape(fan_in, fan_out))
        if take().split() != ["bias", str(i), str(fan_out)]:
            raise MalformedRecordError(f"{path}:{pos}: expected bias header for layer {i}")
        biases.append(np.array(floats(take(), fan_out)))
    if any(line.strip() for line in lines[pos:]):
        raise MalformedRecordError(f"{path}:{pos + 1}: trailing data")
    try:
        return AccuracyPredictor(weights, biases)
    except ConfigurationError as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc


# -- prediction sets --------------------------------------------------------


def save_predictions(preds: PredictionSet, path) -> None:
    buf = io.StringIO()
    buf.write(f"ofa2-predictions {FORMAT_VERSION}\n")
    buf.write(f"encoding {preds.encoding}\n")
    buf.write(f"n_models {preds.n_models}\nn_samples {preds.n_samples}\nn_classes {preds.n_classes}\n")
    for m in range(preds.n_models):
        buf.write(f"model {m} {float(preds.latencies[m])!r} {float(preds.sizes[m])!r}\n")
    for s in range(preds.n_samples):
        blocks = []
        for m in range(preds.n_models):
            if preds.probs is not None:
                blocks.append(_row(preds.probs[m, s].tolist()))
            else:
                pairs = zip(preds.top5_classes[m, s].tolist(), preds.top5_scores[m, s].tolist())
                blocks.append(" ".join(f"{c}:{sc!r}" for c, sc in pairs))
        buf.write(f"{int(preds.labels[s])} | " + " | ".join(blocks) + "\n")
    _write_text(path, buf.getvalue())


def load_predictions(path) -> PredictionSet:
    lines = _read_text(path).splitlines()
    try:
        head = lines[0].split()
        if len(head) != 2 or head[0] != "ofa2-predictions":
            raise MalformedRecordError(f"{path}: not a prediction set file")
        _check_version(head[1], path)
        fields = {}
        for i in range(1, 5):
            key, value = lines[i].split()
            fields[key] = value
        encoding = fields["encoding"]
        m, s, c = int(fields["n_models"]), int(fields["n_samples"]), int(fields["n_classes"])
        lat, size = np.empty(m), np.empty(m)
        for j in range(m):
            parts = lines[5 + j].split()
            if parts[0] != "model" or int(parts[1]) != j:
                raise ValueError(f"line {6 + j}: expected model {j}")
            lat[j], size[j] = float(parts[2]), float(parts[3])
        body = lines[5 + m :]
        if len([ln for ln in body if ln.strip()]) != s:
            raise ValueError(f"expected {s} sample records, found {len(body)}")
        labels = np.empty(s, dtype=np.int64)
        if encoding == "prob":
            probs = np.empty((m, s, c))
        elif encoding == "top5":
            classes = np.empty((m, s, 5), dtype=np.int64)
            scores = np.empty((m, s, 5))
        else:
            raise ValueError(f"unknown encoding {encoding!r}")
        for i in range(s):
            parts = body[i].split(" | ")
            if len(parts) != m + 1:
                raise ValueError(f"sample {i}: expected {m} model blocks")
            labels[i] = int(parts[0])
            for j in range(m):
                vals = parts[j + 1].split()
                if encoding == "prob":
                    if len(vals) != c:
                        raise ValueError(f"sample {i} model {j}: expected {c} probabilities")
                    probs[j, i] = [float(v) for v in vals]
                else:
                    if len(vals) != 5:
                        raise ValueError(f"sample {i} model {j}: expected 5 class:score pairs")
                    for k, pair in enumerate(vals):
                        cls, sc = pair.split(":")
                        classes[j, i, k], scores[j, i, k] = int(cls), float(sc)
    except FormatVersionError:
        raise
    except MalformedRecordError:
        raise
    except (ValueError, IndexError, KeyError) as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc
    try:
        if encoding == "prob":
            return PredictionSet(labels, lat, size, c, probs=probs)
        return PredictionSet(labels, lat, size, c, top5_classes=classes, top5_scores=scores)
    except ValueError as exc:
        raise MalformedRecordError(f"{path}: {exc}") from exc


# -- CSV exports ------------------------------------------------------------

FRONT_COLUMNS = ["phenotype_key", "top1_error", "latency_ms", "architecture", "genes"]
HV_COLUMNS = ["generation", "hypervolume"]
ENSEMBLE_COLUMNS = [
    "spec_id",
    "members",
    "size",
    "voting",
    "latency_mode",
    "accuracy",
    "latency_ms",
    "nondominated",
]


def _write_csv(path, header: list[str], rows: Iterable[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _write_text(path, buf.getvalue())


def export_front_csv(individuals: Sequence[Individual], path) -> None:
    rows = []
    for ind in individuals:
        key = phenotype_key(ind.genotype).hex()
        err, lat = ind.objectives.as_tuple()
        rows.append([key, float(err), float(lat), decode(ind.genotype).summary(), " ".join(map(str, ind.genotype.to_list()))])
    rows.sort(key=lambda r: (r[2], r[0]))
    _write_csv(path, FRONT_COLUMNS, rows)


def export_hv_csv(series: Sequence[tuple[int, float]], path) -> None:
    _write_csv(path, HV_COLUMNS, [[int(g), float(h)] for g, h in series])


def export_ensemble_csv(experiment: ExperimentResult, path) -> None:
    rows = []
    for r, nd in zip(experiment.results, experiment.nondominated):
        rows.append(
            [
                r.spec_id,
                " ".join(map(str, r.spec.members)),
                len(r.spec.members),
                r.spec.voting,
                r.spec.latency_mode,
                float(r.accuracy),
                float(r.latency),
                int(nd),
            ]
        )
    _write_csv(path, ENSEMBLE_COLUMNS, rows)


BASELINE_COLUMNS = ["latency_constraint", "top1_error", "latency_ms", "architecture", "genes"]


def save_baseline(records: Sequence[dict], evaluator: dict, path) -> None:
    """Write constrained-search records, one per latency constraint."""
    _write_text(path, _dump_json("ofa2-baseline", {"evaluator": evaluator, "records": list(records)}))


def load_baseline(path) -> list[dict]:
    return _load_json("ofa2-baseline", path)["records"]


def export_baseline_csv(records: Sequence[dict], path) -> None:
    rows = [
        [float(r["latency_constraint"]), float(r["top1_error"]), float(r["latency_ms"]), r["architecture"], " ".join(map(str, r["genes"]))]
        for r in records
    ]
    _write_csv(path, BASELINE_COLUMNS, rows)


def read_csv(path) -> list[dict[str, str]]:
    text = _read_text(path)
    return list(csv.DictReader(io.StringIO(text)))
