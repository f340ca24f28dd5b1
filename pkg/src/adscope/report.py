"""Corpus statistics: market share, category usage, install-bucket profiles, per-library table, correlation."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DegenerateInput, MissingFixture
from .ingest import CANONICAL_BUCKETS, AppRecord
from .libid import LibraryCall, LibraryHit
from .privclass import ClassifiedApi, PrivacyCategory

OTHER = "Other"


@dataclass(frozen=True, order=True)
class LeakCallKey:
    """Deduplication unit: repeated calls of one kind to one library count once per app."""

    app_id: str
    library: str
    category: PrivacyCategory


@dataclass(frozen=True)
class MarketShare:
    library: str
    app_count: int
    pct_of_corpus: float


@dataclass(frozen=True)
class CategoryUsage:
    category: PrivacyCategory
    apps_making_call: int
    pct_of_apps: float
    installs_weight: int
    pct_of_installs: float


@dataclass(frozen=True)
class BucketProfile:
    bucket_lower: int
    app_count: int
    mean_keys_per_app: float


@dataclass
class PerLibraryTable:
    libraries: list[str]
    cells: dict[tuple[PrivacyCategory, str], float | None]  # None = library has no such method
    denominators: dict[str, int]
    omitted: list[str] = field(default_factory=list)

    def cell(self, category: PrivacyCategory, library: str) -> float | None:
        return self.cells.get((category, library))


def leak_keys(calls: Iterable[LibraryCall], classified: ClassifiedApi,
              libraries: Iterable[str] | None = None) -> set[LeakCallKey]:
    allowed = None if libraries is None else set(libraries)
    keys = set()
    for call in calls:
        if allowed is not None and call.library not in allowed:
            continue
        cls = classified.get(call.library, {}).get(call.edge.callee)
        if cls is not None and cls.category is not None:
            keys.add(LeakCallKey(call.edge.app_id, call.library, cls.category))
    return keys


def market_share(hits: Iterable[LibraryHit], total_apps: int, top_n: int | None = 20) -> list[MarketShare]:
    """Apps per library, descending; libraries beyond ``top_n`` fold into one "Other" row (distinct apps)."""
    apps_by_lib: dict[str, set[str]] = defaultdict(set)
    for h in hits:
        apps_by_lib[h.canonical_name].add(h.app_id)
    ranked = sorted(apps_by_lib.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    head = ranked if top_n is None else ranked[:top_n]
    tail = [] if top_n is None else ranked[top_n:]
    denom = total_apps or 1
    rows = [MarketShare(lib, len(ids), len(ids) / denom) for lib, ids in head]
    if tail:
        other = set().union(*(ids for _, ids in tail))
        rows.append(MarketShare(OTHER, len(other), len(other) / denom))
    return rows


def top_libraries(shares: Sequence[MarketShare]) -> list[str]:
    return [s.library for s in shares if s.library != OTHER]


def category_usage(classified: ClassifiedApi, calls: Iterable[LibraryCall], apps: Sequence[AppRecord],
                   libraries: Iterable[str] | None = None) -> list[CategoryUsage]:
    """One row per category, in category order.

    Install weights are bucket lower bounds; apps with unknown installs count
    toward app percentages only.
    """
    bucket = {a.app_id: a.install_bucket_lower for a in apps}
    total_apps = len(apps)
    total_installs = sum(b for b in bucket.values() if b is not None)
    apps_per_cat: dict[PrivacyCategory, set[str]] = defaultdict(set)
    for key in leak_keys(calls, classified, libraries):
        if key.app_id in bucket:
            apps_per_cat[key.category].add(key.app_id)
    rows = []
    for cat in PrivacyCategory:
        ids = apps_per_cat.get(cat, set())
        weight = sum(bucket[i] for i in ids if bucket[i] is not None)
        rows.append(CategoryUsage(
            cat, len(ids),
            len(ids) / total_apps if total_apps else 0.0,
            weight,
            weight / total_installs if total_installs else 0.0,
        ))
    return rows


def bucket_profile(classified: ClassifiedApi, calls: Iterable[LibraryCall], apps: Sequence[AppRecord],
                   libraries: Iterable[str] | None = None) -> list[BucketProfile]:
    """Mean distinct LeakCallKeys per app for each populated install bucket, ascending."""
    per_app = Counter(k.app_id for k in leak_keys(calls, classified, libraries))
    members: dict[int, list[str]] = defaultdict(list)
    for a in apps:
        if a.install_bucket_lower is not None:
            members[a.install_bucket_lower].append(a.app_id)
    return [
        BucketProfile(b, len(members[b]), sum(per_app[i] for i in members[b]) / len(members[b]))
        for b in sorted(members)
    ]


def per_library_table(classified: ClassifiedApi, calls: Iterable[LibraryCall],
                      presence: Mapping[str, Iterable[str]], libraries: Sequence[str]) -> PerLibraryTable:
    """cell = apps making >=1 call of that category to the library / apps containing the library."""
    containing: Counter = Counter()
    for app_id, libs in presence.items():
        for lib in set(libs):
            containing[lib] += 1
    numer: dict[tuple[PrivacyCategory, str], set[str]] = defaultdict(set)
    for key in leak_keys(calls, classified, libraries):
        numer[(key.category, key.library)].add(key.app_id)
    kept = [lib for lib in libraries if containing[lib] > 0]
    omitted = [lib for lib in libraries if containing[lib] == 0]
    cells: dict[tuple[PrivacyCategory, str], float | None] = {}
    for lib in kept:
        offered = {c.category for c in classified.get(lib, {}).values() if c.category is not None}
        for cat in PrivacyCategory:
            cells[(cat, lib)] = len(numer[(cat, lib)]) / containing[lib] if cat in offered else None
    return PerLibraryTable(kept, cells, {lib: containing[lib] for lib in kept}, omitted)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    n = len(x)
    if n != len(y):
        raise DegenerateInput(f"length mismatch: {n} vs {len(y)}")
    if n < 2:
        raise DegenerateInput("need at least two observations")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        raise DegenerateInput("constant vector")
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def corpus_summary(apps: Iterable[AppRecord]) -> dict[int, int]:
    """App counts per canonical install bucket (populated buckets only, ascending)."""
    counts = Counter(a.install_bucket_lower for a in apps if a.install_bucket_lower is not None)
    return {b: counts[b] for b in CANONICAL_BUCKETS if counts[b]}


# --- permission fixture ----------------------------------------------------

@dataclass(frozen=True)
class PermissionRow:
    library: str
    permissions: int
    privacy_api_calls: int


def parse_permission_table(text: str) -> list[PermissionRow]:
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        name, perms, calls = [c.strip() for c in line.split("\t")][:3]
        rows.append(PermissionRow(name, int(perms), int(calls)))
    return rows


def load_permission_table(path: str | os.PathLike | None = None) -> list[PermissionRow]:
    if path is None:
        text = resources.files("adscope").joinpath("data/library_permissions.tsv").read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise MissingFixture(f"permission table {path} not found") from None
    return parse_permission_table(text)


# --- rendering -------------------------------------------------------------

@dataclass
class ReportTable:
    columns: list[str]
    rows: list[dict]
    metadata: dict = field(default_factory=dict)


def _pct(x: float, digits: int) -> str:
    return f"{100 * x:.{digits}f}"


def market_share_table(shares: Sequence[MarketShare], total_apps: int) -> ReportTable:
    rows = [{"library": s.library, "app_count": s.app_count, "pct_of_corpus": s.pct_of_corpus,
             "pct_display": _pct(s.pct_of_corpus, 1)} for s in shares]
    return ReportTable(["library", "app_count", "pct_of_corpus", "pct_display"], rows, {"total_apps": total_apps})


def category_usage_table(usage: Sequence[CategoryUsage], total_apps: int, total_installs: int,
                         unknown_installs: int) -> ReportTable:
    rows = [{
        "category": u.category.value,
        "label": u.category.label,
        "apps_making_call": u.apps_making_call,
        "pct_of_apps": u.pct_of_apps,
        "installs_weight": u.installs_weight,
        "pct_of_installs": u.pct_of_installs,
        "pct_apps_display": _pct(u.pct_of_apps, 2),
        "pct_installs_display": _pct(u.pct_of_installs, 2),
        "developer_channel": u.category.developer_channel,
    } for u in usage]
    return ReportTable(
        list(rows[0]) if rows else [], rows,
        {"total_apps": total_apps, "total_installs_weight": total_installs,
         "apps_with_unknown_installs": unknown_installs},
    )


def bucket_profile_table(profiles: Sequence[BucketProfile], unknown_installs: int) -> ReportTable:
    populated = {p.bucket_lower for p in profiles}
    rows = [asdict(p) for p in profiles]
    return ReportTable(
        ["bucket_lower", "app_count", "mean_keys_per_app"], rows,
        {"omitted_empty_buckets": [b for b in CANONICAL_BUCKETS if b not in populated],
         "apps_with_unknown_installs": unknown_installs},
    )


def per_library_rows(table: PerLibraryTable) -> ReportTable:
    rows = []
    for cat in PrivacyCategory:
        row = {"category": cat.value}
        for lib in table.libraries:
            v = table.cell(cat, lib)
            row[lib] = "" if v is None else _pct(v, 1)
        rows.append(row)
    return ReportTable(
        ["category"] + list(table.libraries), rows,
        {"apps_containing_library": table.denominators, "omitted_libraries_no_apps": table.omitted,
         "fractions": {f"{cat.value}|{lib}": v for (cat, lib), v in sorted(
             table.cells.items(), key=lambda kv: (kv[0][0].value, kv[0][1])) if v is not None}},
    )


def corpus_summary_table(hist: Mapping[int, int], unknown_installs: int) -> ReportTable:
    rows = [{"bucket_lower": b, "app_count": n} for b, n in hist.items()]
    return ReportTable(["bucket_lower", "app_count"], rows, {"apps_with_unknown_installs": unknown_installs})


def api_size_table(dist: Mapping) -> ReportTable:
    rows = [{"library": lib, "distinct_methods": n} for lib, n in dist["sizes"].items()]
    return ReportTable(["library", "distinct_methods"], rows, {"histogram": dist["histogram"]})


def correlation_table(perm_rows: Sequence[PermissionRow], derived_counts: Mapping[str, int] | None = None) -> ReportTable:
    x = [r.permissions for r in perm_rows]
    y = [r.privacy_api_calls for r in perm_rows]
    meta: dict = {}
    try:
        r = pearson(x, y)
        meta.update(r=r, r_display=f"{r:.2f}")
    except DegenerateInput as exc:
        meta.update(r=None, r_display="", error=str(exc))
    rows = [asdict(p) for p in perm_rows]
    if derived_counts is not None:
        for row in rows:
            row["ruleset_categories"] = derived_counts.get(row["library"], 0)
        try:
            r2 = pearson(x, [row["ruleset_categories"] for row in rows])
            meta.update(r_ruleset=r2, r_ruleset_display=f"{r2:.2f}")
        except DegenerateInput as exc:
            meta.update(r_ruleset=None, r_ruleset_error=str(exc))
    cols = ["library", "permissions", "privacy_api_calls"] + (["ruleset_categories"] if derived_counts is not None else [])
    return ReportTable(cols, rows, meta)


def write_tables(tables: Mapping[str, ReportTable], out_dir: str | os.PathLike, fmt: str = "csv",
                 extra_meta: Mapping | None = None) -> list[Path]:
    """Write one file per table plus ``metadata.json``; output is byte-stable for equal input."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    meta = {"run": dict(extra_meta or {}), "reports": {}}
    for name in sorted(tables):
        t = tables[name]
        meta["reports"][name] = t.metadata
        if fmt == "json":
            path = out / f"{name}.json"
            path.write_text(json.dumps({"columns": t.columns, "rows": t.rows, "metadata": t.metadata},
                                       indent=1, sort_keys=True) + "\n", encoding="utf-8")
        else:
            path = out / f"{name}.csv"
            buf = io.StringIO()
            w = csv.DictWriter(buf, fieldnames=t.columns, lineterminator="\n")
            w.writeheader()
            w.writerows(t.rows)
            path.write_text(buf.getvalue(), encoding="utf-8")
        written.append(path)
    path = out / "metadata.json"
    path.write_text(json.dumps(meta, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
    written.append(path)
    return written
