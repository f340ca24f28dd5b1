"""Working-API reconstruction: which library methods apps actually call, and how often."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .libid import LibraryCall
from .model import MethodRef

SIZE_BUCKETS = ("1-10", "11-50", "51-200", ">200")
CSV_COLUMNS = ("library", "class", "method", "descriptor", "app_count", "call_site_count")


@dataclass(frozen=True)
class WorkingApiEntry:
    library: str
    method: MethodRef
    app_count: int
    call_site_count: int


@dataclass(frozen=True)
class WorkingApi:
    library: str
    entries: tuple[WorkingApiEntry, ...] = ()

    @property
    def distinct_method_count(self) -> int:
        return len(self.entries)

    def methods(self) -> list[MethodRef]:
        return [e.method for e in self.entries]

    def entry(self, method: MethodRef) -> WorkingApiEntry | None:
        for e in self.entries:
            if e.method == method:
                return e
        return None


@dataclass
class ApiAccumulator:
    """Mergeable partial aggregation. Holds app-id sets so merges are exact for any edge partition."""

    call_sites: Counter = field(default_factory=Counter)
    apps: dict = field(default_factory=lambda: defaultdict(set))

    def add(self, call: LibraryCall) -> None:
        key = (call.library, call.edge.callee)
        self.call_sites[key] += 1
        self.apps[key].add(call.edge.app_id)

    def update(self, calls: Iterable[LibraryCall]) -> "ApiAccumulator":
        for c in calls:
            self.add(c)
        return self

    def merge(self, other: "ApiAccumulator") -> "ApiAccumulator":
        out = ApiAccumulator(self.call_sites + other.call_sites)
        for src in (self.apps, other.apps):
            for key, ids in src.items():
                out.apps[key] |= ids
        return out

    def finish(self) -> dict[str, WorkingApi]:
        return _freeze((key, len(self.apps[key]), n) for key, n in self.call_sites.items())


def _freeze(rows: Iterable[tuple[tuple[str, MethodRef], int, int]]) -> dict[str, WorkingApi]:
    per_lib: dict[str, list[WorkingApiEntry]] = defaultdict(list)
    for (library, method), apps, sites in rows:
        per_lib[library].append(WorkingApiEntry(library, method, apps, sites))
    return {
        lib: WorkingApi(lib, tuple(sorted(entries, key=lambda e: e.method)))
        for lib, entries in sorted(per_lib.items())
    }


def reconstruct(calls: Iterable[LibraryCall]) -> dict[str, WorkingApi]:
    """Pool app->library calls into one working API per library (all versions together)."""
    return ApiAccumulator().update(calls).finish()


def reconstruct_streaming(per_app_calls: Iterable[Iterable[LibraryCall]]) -> dict[str, WorkingApi]:
    """Same result as :func:`reconstruct` without holding app-id sets.

    Requires each app's calls to arrive as one group; memory is bounded by the
    number of distinct (library, method) keys plus one app at a time.
    """
    sites: Counter = Counter()
    apps: Counter = Counter()
    for calls in per_app_calls:
        seen = set()
        for c in calls:
            key = (c.library, c.edge.callee)
            sites[key] += 1
            seen.add(key)
        apps.update(seen)
    return _freeze((key, apps[key], n) for key, n in sites.items())


def merge_working_apis(a: Mapping[str, WorkingApi], b: Mapping[str, WorkingApi]) -> dict[str, WorkingApi]:
    """Entrywise sum. Exact only when ``a`` and ``b`` were built from disjoint sets of apps."""
    sites: Counter = Counter()
    apps: Counter = Counter()
    for side in (a, b):
        for api in side.values():
            for e in api.entries:
                sites[(e.library, e.method)] += e.call_site_count
                apps[(e.library, e.method)] += e.app_count
    return _freeze((key, apps[key], n) for key, n in sites.items())


def api_size_distribution(apis: Mapping[str, WorkingApi]) -> dict:
    """Histogram of per-library working-API sizes; the 1-10 bucket includes 10."""
    hist = dict.fromkeys(SIZE_BUCKETS, 0)
    sizes = {}
    for lib, api in sorted(apis.items()):
        n = api.distinct_method_count
        sizes[lib] = n
        if n < 1:
            continue
        if n <= 10:
            hist["1-10"] += 1
        elif n <= 50:
            hist["11-50"] += 1
        elif n <= 200:
            hist["51-200"] += 1
        else:
            hist[">200"] += 1
    return {"histogram": hist, "sizes": sizes}


def _rows(apis: Mapping[str, WorkingApi]):
    for lib in sorted(apis):
        for e in apis[lib].entries:
            yield {
                "library": lib,
                "class": e.method.class_descriptor,
                "method": e.method.method_name,
                "descriptor": e.method.descriptor,
                "app_count": e.app_count,
                "call_site_count": e.call_site_count,
            }


def to_csv(apis: Mapping[str, WorkingApi]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(_rows(apis))
    return buf.getvalue()


def to_json(apis: Mapping[str, WorkingApi]) -> str:
    return json.dumps(list(_rows(apis)), indent=1) + "\n"


def from_rows(rows: Iterable[Mapping]) -> dict[str, WorkingApi]:
    """Inverse of the CSV/JSON export."""
    return _freeze(
        ((r["library"], MethodRef.from_parts(r["class"], r["method"], r["descriptor"])),
         int(r["app_count"]), int(r["call_site_count"]))
        for r in rows
    )
