"""Dataset persistence and array packing.

The on-disk format is line-delimited JSON: a schema header record followed
by one journey per line. Feature values are emitted exactly as stored, so a
load/save round trip is byte-identical for datasets produced by this
package (the simulator rounds features at generation time for compactness).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import (
    ALL_MILESTONES,
    Dataset,
    DatasetSchema,
    ImpressionRecord,
    JourneyRecord,
    LabelVector,
    SearchRecord,
)
from .errors import DataValidationError, SchemaMismatchError

_SCHEMA_KEYS = {"record", "listing_dim", "context_dim", "context_features",
                "milestones", "window_days"}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def journey_to_record(journey: JourneyRecord) -> dict:
    return {
        "guest_id": journey.guest_id,
        "searches": [
            {
                "search_id": s.search_id,
                "t_days": float(s.t_days),
                "context": [float(v) for v in s.context],
                "impressions": [
                    {
                        "listing_id": imp.listing_id,
                        "position": int(imp.position),
                        "features": [float(v) for v in imp.features],
                        "labels": {m: True for m in imp.labels.true_milestones()},
                    }
                    for imp in s.impressions
                ],
            }
            for s in journey.searches
        ],
    }


def journey_from_record(rec: dict) -> JourneyRecord:
    try:
        searches = []
        for s in rec["searches"]:
            imps = []
            for i in s["impressions"]:
                labels = i.get("labels", {})
                unknown = set(labels) - set(ALL_MILESTONES)
                if unknown:
                    raise DataValidationError(
                        f"unknown milestone labels {sorted(unknown)}")
                imps.append(ImpressionRecord(
                    listing_id=str(i["listing_id"]),
                    position=int(i["position"]),
                    features=np.asarray(i["features"], dtype=np.float64),
                    labels=LabelVector.from_milestones(
                        m for m, v in labels.items() if v),
                ))
            searches.append(SearchRecord(
                search_id=str(s["search_id"]),
                t_days=float(s["t_days"]),
                context=np.asarray(s["context"], dtype=np.float64),
                impressions=tuple(imps),
            ))
        return JourneyRecord(guest_id=str(rec["guest_id"]), searches=tuple(searches))
    except KeyError as exc:
        raise DataValidationError(f"journey record missing field {exc}") from None


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(_canonical(dataset.schema.to_record()) + "\n")
        for journey in dataset.journeys:
            f.write(_canonical(journey_to_record(journey)) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path) as f:
        header = f.readline()
        if not header:
            raise SchemaMismatchError(f"{path}: empty dataset file")
        try:
            schema_rec = json.loads(header)
        except json.JSONDecodeError as exc:
            raise SchemaMismatchError(f"{path}: malformed schema header: {exc}") from None
        if schema_rec.get("record") != "schema":
            raise SchemaMismatchError(f"{path}: first line must be the schema record")
        if set(schema_rec) != _SCHEMA_KEYS:
            raise SchemaMismatchError(
                f"{path}: schema fields {sorted(set(schema_rec) ^ _SCHEMA_KEYS)} "
                "unexpected or missing")
        schema = DatasetSchema(
            listing_dim=int(schema_rec["listing_dim"]),
            context_dim=int(schema_rec["context_dim"]),
            context_features=tuple(schema_rec["context_features"]),
            window_days=float(schema_rec["window_days"]),
            milestones=tuple(schema_rec["milestones"]),
        )
        journeys = []
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}:{line_no}: bad JSON: {exc}") from None
            journeys.append(journey_from_record(rec))
    return Dataset(schema, tuple(journeys))


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# train/eval split


def guest_bucket(guest_id: str) -> int:
    """Stable hash bucket in [0, 100) used for the train/eval split."""
    digest = hashlib.sha256(guest_id.encode()).digest()
    return int.from_bytes(digest[:8], "big") % 100


def split_by_guest(dataset: Dataset, eval_percent: int = 20) -> tuple[Dataset, Dataset]:
    """Deterministic guest-level split; no journey straddles the boundary."""
    if not 0 < eval_percent < 100:
        raise DataValidationError("eval_percent must be in (0, 100)")
    train, evaluation = [], []
    for journey in dataset.journeys:
        if guest_bucket(journey.guest_id) < eval_percent:
            evaluation.append(journey)
        else:
            train.append(journey)
    return (Dataset(dataset.schema, tuple(train)),
            Dataset(dataset.schema, tuple(evaluation)))


# ---------------------------------------------------------------------------
# packed arrays for the model


@dataclass(frozen=True)
class PackedSearches:
    """Column-oriented view of a list of searches.

    Impressions are stored contiguously by search, so per-search reductions
    can use segment operations with ids 0..n_searches-1.
    """

    listing_features: np.ndarray      # [n_impressions, listing_dim]
    context_features: np.ndarray      # [n_searches, context_dim]
    search_of_imp: np.ndarray         # [n_impressions] int64
    search_starts: np.ndarray         # [n_searches + 1] int64 prefix offsets
    labels: dict[str, np.ndarray]     # milestone -> bool [n_impressions]
    listing_ids: list[str]
    positions: np.ndarray             # [n_impressions] int64
    search_ids: list[str]
    t_days: np.ndarray                # [n_searches]

    @property
    def n_searches(self) -> int:
        return len(self.search_ids)

    @property
    def n_impressions(self) -> int:
        return len(self.listing_ids)

    def imp_rows_for_searches(self, search_idx: np.ndarray) -> np.ndarray:
        """Impression row indices of the given searches, in search order."""
        starts = self.search_starts[search_idx]
        lengths = self.search_starts[search_idx + 1] - starts
        total = int(lengths.sum())
        offsets = np.repeat(starts, lengths)
        within = np.arange(total) - np.repeat(
            np.cumsum(lengths) - lengths, lengths)
        return offsets + within


def pack_searches(searches) -> PackedSearches:
    """Flatten SearchRecord objects into contiguous arrays."""
    listing_rows = []
    context_rows = []
    seg = []
    starts = [0]
    labels = {m: [] for m in ALL_MILESTONES if m != "imp"}
    listing_ids = []
    positions = []
    search_ids = []
    t_days = []
    for s_idx, search in enumerate(searches):
        context_rows.append(np.asarray(search.context, dtype=np.float64))
        search_ids.append(search.search_id)
        t_days.append(search.t_days)
        for imp in search.impressions:
            listing_rows.append(np.asarray(imp.features, dtype=np.float64))
            seg.append(s_idx)
            listing_ids.append(imp.listing_id)
            positions.append(imp.position)
            for m in labels:
                labels[m].append(imp.labels.get(m))
        starts.append(len(listing_ids))
    return PackedSearches(
        listing_features=(np.vstack(listing_rows) if listing_rows
                          else np.zeros((0, 0))),
        context_features=(np.vstack(context_rows) if context_rows
                          else np.zeros((0, 0))),
        search_of_imp=np.asarray(seg, dtype=np.int64),
        search_starts=np.asarray(starts, dtype=np.int64),
        labels={m: np.asarray(v, dtype=bool) for m, v in labels.items()},
        listing_ids=listing_ids,
        positions=np.asarray(positions, dtype=np.int64),
        search_ids=search_ids,
        t_days=np.asarray(t_days, dtype=np.float64),
    )


def pack_dataset(dataset: Dataset) -> PackedSearches:
    return pack_searches(s for _, s in dataset.iter_searches())
