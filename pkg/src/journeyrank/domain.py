"""Milestone taxonomy, journey records, label attribution, and dataset rules.

A guest journey is a time-ordered list of searches; each search shows a
ranked list of listings (impressions). Outcomes are milestones: the nested
positive chain click -> long click -> payment page -> request -> booking ->
uncancelled booking, plus three negative outcomes (host rejection, host
cancellation, guest cancellation). Raw journeys record each milestone only
on the impression where the action happened; :func:`attribute_labels`
propagates them into the multi-label training view.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataValidationError, UndefinedTaskWeightError


class Milestone(str, enum.Enum):
    """The ten per-impression outcome flags (imp is always set)."""

    IMP = "imp"
    CLICK = "c"
    LONG_CLICK = "lc"
    PAYMENT_PAGE = "pp"
    REQUEST = "req"
    BOOKING = "book"
    UNCANCELLED = "unc"
    REJECTION = "rej"
    CANCEL_BY_HOST = "cbh"
    CANCEL_BY_GUEST = "cbg"

    @property
    def is_negative(self) -> bool:
        return self.value in NEGATIVE_MILESTONES

    @property
    def is_positive_chain(self) -> bool:
        return self.value in POSITIVE_CHAIN


# funnel order: each later milestone implies all earlier ones
POSITIVE_CHAIN: tuple[str, ...] = ("c", "lc", "pp", "req", "book", "unc")
NEGATIVE_MILESTONES: tuple[str, ...] = ("rej", "cbh", "cbg")
ALL_MILESTONES: tuple[str, ...] = ("imp",) + POSITIVE_CHAIN + NEGATIVE_MILESTONES

# eligibility parent for each negative outcome: rejections happen to
# requests, cancellations happen to bookings
NEGATIVE_PARENT: dict[str, str] = {"rej": "req", "cbh": "book", "cbg": "book"}


def _as_milestone_value(task) -> str:
    value = task.value if isinstance(task, Milestone) else str(task)
    if value not in ALL_MILESTONES:
        raise ConfigError(f"unknown milestone {task!r}")
    return value


@dataclass(frozen=True, slots=True)
class LabelVector:
    """Boolean outcome flags for one impression. ``imp`` is always true."""

    c: bool = False
    lc: bool = False
    pp: bool = False
    req: bool = False
    book: bool = False
    unc: bool = False
    rej: bool = False
    cbh: bool = False
    cbg: bool = False

    @property
    def imp(self) -> bool:
        return True

    def get(self, milestone) -> bool:
        value = _as_milestone_value(milestone)
        if value == "imp":
            return True
        return getattr(self, value)

    def violations(self) -> list[str]:
        """Names of violated label implications; empty means consistent."""
        out = []
        flags = [getattr(self, m) for m in POSITIVE_CHAIN]
        if any(flags[k] and not flags[k - 1] for k in range(1, len(flags))):
            out.append("funnel consistency")
        if self.rej and not self.req:
            out.append("rej implies req")
        if self.rej and self.book:
            out.append("rej excludes book")
        if self.cbh and not self.book:
            out.append("cbh implies book")
        if self.cbg and not self.book:
            out.append("cbg implies book")
        if self.unc and (self.rej or self.cbh or self.cbg):
            out.append("unc excludes cancellations")
        return out

    def grade(self) -> int:
        """Graded relevance: 3 uncancelled booking, 2 clicked, 1 plain
        impression, 0 any negative outcome."""
        if self.unc:
            return 3
        if self.rej or self.cbh or self.cbg:
            return 0
        if self.c:
            return 2
        return 1

    def true_milestones(self) -> tuple[str, ...]:
        return tuple(m for m in POSITIVE_CHAIN + NEGATIVE_MILESTONES
                     if getattr(self, m))

    @classmethod
    def from_milestones(cls, milestones) -> "LabelVector":
        values = {_as_milestone_value(m) for m in milestones}
        values.discard("imp")
        return cls(**{m: True for m in values})


def relevance_grade(labels: LabelVector) -> int:
    return labels.grade()


@dataclass(frozen=True, slots=True)
class ImpressionRecord:
    """One listing shown at one rank in one search."""

    listing_id: str
    position: int
    features: np.ndarray
    labels: LabelVector

    def with_labels(self, labels: LabelVector) -> "ImpressionRecord":
        return ImpressionRecord(self.listing_id, self.position, self.features, labels)


@dataclass(frozen=True, slots=True)
class SearchRecord:
    """One ranked result page with its query/guest context."""

    search_id: str
    t_days: float
    context: np.ndarray
    impressions: tuple[ImpressionRecord, ...]


@dataclass(frozen=True, slots=True)
class JourneyRecord:
    """All searches of one guest within the journey window, time-ordered."""

    guest_id: str
    searches: tuple[SearchRecord, ...]

    @property
    def outcome(self) -> str:
        """Terminal classification: uncancelled booking beats a cancelled or
        rejected attempt, which beats pure abandonment."""
        any_neg = False
        for search in self.searches:
            for imp in search.impressions:
                if imp.labels.unc:
                    return "unc"
                if imp.labels.rej or imp.labels.cbh or imp.labels.cbg:
                    any_neg = True
        return "cancelled_or_rejected" if any_neg else "abandoned"

    def n_impressions(self) -> int:
        return sum(len(s.impressions) for s in self.searches)


REQUIRED_CONTEXT_FEATURES = ("days_ahead_of_checkin", "num_previous_searches")


@dataclass(frozen=True)
class DatasetSchema:
    """Feature widths, context feature names, milestones, journey window."""

    listing_dim: int
    context_dim: int
    context_features: tuple[str, ...]
    window_days: float = 30.0
    milestones: tuple[str, ...] = ALL_MILESTONES

    def __post_init__(self):
        object.__setattr__(self, "context_features", tuple(self.context_features))
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.listing_dim <= 0 or self.context_dim <= 0:
            raise ConfigError("feature widths must be positive")
        if len(self.context_features) != self.context_dim:
            raise ConfigError("context feature name count must equal context_dim")
        for name in REQUIRED_CONTEXT_FEATURES:
            if name not in self.context_features:
                raise ConfigError(f"context schema must include {name!r}")
        if self.window_days <= 0:
            raise ConfigError("journey window must be positive")

    def context_index(self, feature_name: str) -> int:
        try:
            return self.context_features.index(feature_name)
        except ValueError:
            raise ConfigError(f"unknown context feature {feature_name!r}") from None

    def to_record(self) -> dict:
        return {
            "record": "schema",
            "listing_dim": self.listing_dim,
            "context_dim": self.context_dim,
            "context_features": list(self.context_features),
            "milestones": list(self.milestones),
            "window_days": self.window_days,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_record(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Dataset:
    schema: DatasetSchema
    journeys: tuple[JourneyRecord, ...]

    @property
    def n_journeys(self) -> int:
        return len(self.journeys)

    @property
    def n_searches(self) -> int:
        return sum(len(j.searches) for j in self.journeys)

    @property
    def n_impressions(self) -> int:
        return sum(j.n_impressions() for j in self.journeys)

    def iter_searches(self):
        for journey in self.journeys:
            for search in journey.searches:
                yield journey, search


# ---------------------------------------------------------------------------
# label attribution


def attribute_labels(journey: JourneyRecord) -> JourneyRecord:
    """Propagate raw milestone events into the multi-label training view.

    Raw journeys carry each milestone only on the impression where the
    action occurred. After attribution, a positive milestone achieved on a
    listing marks every impression of that listing in searches at or before
    the occurrence; a negative milestone marks every impression of the
    listing anywhere in the journey. Idempotent: attributed journeys pass
    through unchanged.
    """
    for s_idx, search in enumerate(journey.searches):
        for imp in search.impressions:
            bad = imp.labels.violations()
            if bad:
                raise DataValidationError(
                    f"guest={journey.guest_id} search={search.search_id} "
                    f"listing={imp.listing_id}: inconsistent raw labels "
                    f"({'; '.join(bad)})")

    # last search index where each (listing, positive milestone) occurred,
    # and whether each (listing, negative milestone) occurred at all
    last_positive: dict[tuple[str, str], int] = {}
    has_negative: dict[tuple[str, str], bool] = {}
    for s_idx, search in enumerate(journey.searches):
        for imp in search.impressions:
            for m in POSITIVE_CHAIN:
                if getattr(imp.labels, m):
                    last_positive[(imp.listing_id, m)] = s_idx
            for m in NEGATIVE_MILESTONES:
                if getattr(imp.labels, m):
                    has_negative[(imp.listing_id, m)] = True

    new_searches = []
    for s_idx, search in enumerate(journey.searches):
        new_imps = []
        for imp in search.impressions:
            flags = {}
            for m in POSITIVE_CHAIN:
                occurred_at = last_positive.get((imp.listing_id, m))
                flags[m] = occurred_at is not None and s_idx <= occurred_at
            for m in NEGATIVE_MILESTONES:
                flags[m] = has_negative.get((imp.listing_id, m), False)
            new_imps.append(imp.with_labels(LabelVector(**flags)))
        new_searches.append(SearchRecord(search.search_id, search.t_days,
                                         search.context, tuple(new_imps)))
    return JourneyRecord(journey.guest_id, tuple(new_searches))


# ---------------------------------------------------------------------------
# training-data filtering


@dataclass(frozen=True)
class FilterResult:
    """Outcome of restricting a dataset to payment-page journeys."""

    dataset: Dataset
    n_journeys_before: int
    n_journeys_after: int
    n_searches_before: int
    n_searches_after: int
    warning: str | None = None

    @property
    def retained_fraction(self) -> float:
        if self.n_searches_before == 0:
            return 0.0
        return self.n_searches_after / self.n_searches_before


def filter_training_searches(dataset: Dataset) -> FilterResult:
    """Keep only searches from journeys that reached a payment-page view.

    Within kept journeys, impressions of a booked listing that occur after
    its booking search are dropped (they carry no booking label and would
    contradict the journey's outcome), and searches left with fewer than two
    impressions are removed.
    """
    kept_journeys = []
    n_searches_after = 0
    for journey in dataset.journeys:
        if not any(imp.labels.pp
                   for search in journey.searches
                   for imp in search.impressions):
            continue
        last_book: dict[str, int] = {}
        for s_idx, search in enumerate(journey.searches):
            for imp in search.impressions:
                if imp.labels.book:
                    last_book[imp.listing_id] = s_idx
        new_searches = []
        for s_idx, search in enumerate(journey.searches):
            kept = tuple(
                imp for imp in search.impressions
                if not (imp.listing_id in last_book
                        and not imp.labels.book
                        and s_idx > last_book[imp.listing_id]))
            if len(kept) < 2:
                continue
            if len(kept) == len(search.impressions):
                new_searches.append(search)
            else:
                new_searches.append(SearchRecord(search.search_id, search.t_days,
                                                 search.context, kept))
        if new_searches:
            kept_journeys.append(JourneyRecord(journey.guest_id, tuple(new_searches)))
            n_searches_after += len(new_searches)

    warning = None
    if not kept_journeys:
        warning = "no payment-page views found; the filtered training set is empty"
    return FilterResult(
        dataset=Dataset(dataset.schema, tuple(kept_journeys)),
        n_journeys_before=dataset.n_journeys,
        n_journeys_after=len(kept_journeys),
        n_searches_before=dataset.n_searches,
        n_searches_after=n_searches_after,
        warning=warning,
    )


# ---------------------------------------------------------------------------
# dataset validation


@dataclass
class ValidationReport:
    """Violation counts by type; zero violations means the dataset is accepted."""

    violations: Counter = field(default_factory=Counter)
    examples: list[str] = field(default_factory=list)
    n_journeys: int = 0
    n_searches: int = 0
    n_impressions: int = 0

    MAX_EXAMPLES = 20

    @property
    def accepted(self) -> bool:
        return not self.violations

    def add(self, kind: str, where: str) -> None:
        self.violations[kind] += 1
        if len(self.examples) < self.MAX_EXAMPLES:
            self.examples.append(f"{where}: {kind}")

    def to_record(self) -> dict:
        return {
            "accepted": self.accepted,
            "violations": dict(sorted(self.violations.items())),
            "examples": list(self.examples),
            "n_journeys": self.n_journeys,
            "n_searches": self.n_searches,
            "n_impressions": self.n_impressions,
        }


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every label, shape, and structural invariant; never raises."""
    report = ValidationReport()
    schema = dataset.schema
    for journey in dataset.journeys:
        report.n_journeys += 1
        where_j = f"guest={journey.guest_id}"
        times = [s.t_days for s in journey.searches]
        if any(b < a for a, b in zip(times, times[1:])):
            report.add("searches out of order", where_j)
        if times and (max(times) - min(times)) > schema.window_days + 1e-9:
            report.add("journey window", where_j)

        unc_listings = set()
        for search in journey.searches:
            report.n_searches += 1
            where_s = f"{where_j} search={search.search_id}"
            if len(search.context) != schema.context_dim:
                report.add("context width", where_s)
            if len(search.impressions) < 2:
                report.add("too few impressions", where_s)
            positions = [imp.position for imp in search.impressions]
            if len(set(positions)) != len(positions):
                report.add("duplicate position", where_s)
            if any(p < 1 for p in positions):
                report.add("position not 1-based", where_s)
            listing_ids = [imp.listing_id for imp in search.impressions]
            if len(set(listing_ids)) != len(listing_ids):
                report.add("duplicate listing", where_s)
            for imp in search.impressions:
                report.n_impressions += 1
                where_i = f"{where_s} listing={imp.listing_id}"
                if len(imp.features) != schema.listing_dim:
                    report.add("listing width", where_i)
                for kind in imp.labels.violations():
                    report.add(kind, where_i)
                if imp.labels.unc:
                    unc_listings.add(imp.listing_id)
        if len(unc_listings) > 1:
            report.add("multiple unc listings", where_j)
    return report


# ---------------------------------------------------------------------------
# task statistics


def milestone_counts(dataset: Dataset) -> dict[str, int]:
    counts = {m: 0 for m in ALL_MILESTONES}
    for _, search in dataset.iter_searches():
        for imp in search.impressions:
            counts["imp"] += 1
            for m in imp.labels.true_milestones():
                counts[m] += 1
    return counts


def empirical_task_weight(dataset: Dataset, task) -> float:
    """Fraction of task-positive impressions that end in an uncancelled
    booking. Equals 1.0 for the final task by construction."""
    value = _as_milestone_value(task)
    if value not in POSITIVE_CHAIN:
        raise ConfigError(f"task weight is defined for positive-chain "
                          f"milestones, not {value!r}")
    n_task = 0
    n_unc = 0
    for _, search in dataset.iter_searches():
        for imp in search.impressions:
            if imp.labels.get(value):
                n_task += 1
                if imp.labels.unc:
                    n_unc += 1
    if n_task == 0:
        raise UndefinedTaskWeightError(
            f"no impression carries the {value!r} label; weight undefined")
    return n_unc / n_task


def task_weights(dataset: Dataset, tasks) -> dict[str, float]:
    return {_as_milestone_value(t): empirical_task_weight(dataset, t)
            for t in tasks}
