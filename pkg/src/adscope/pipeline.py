"""Glue between modules: per-app scanning and whole-corpus analysis."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import apirecon, report
from .dexparse import extract_call_edges, parse_dex, summarize_classes
from .errors import AdscopeError, MissingCache, NoDexFound
from .ingest import (
    DEX_MAGIC,
    ZIP_MAGIC,
    AppRecord,
    CorpusManifest,
    ScanCache,
    ScanResult,
    digest_bytes,
    parse_call_log,
    unpack_bytes,
)
from .libid import (
    DEFAULT_THRESHOLD,
    EdgeSplit,
    LibraryHit,
    Registry,
    detect_obfuscated,
    prefix_hits,
    split_edges,
)
from .model import ClassSummary
from .privclass import ClassifiedApi, Ruleset, classify

log = logging.getLogger(__name__)


def scan_bytes(app_id: str, data: bytes) -> ScanResult:
    """Scan a DEX, an APK, or call-log text. Raises AdscopeError on unusable input."""
    digest = digest_bytes(data)
    result = ScanResult(app_id, digest)
    if data.startswith(DEX_MAGIC) or data.startswith(ZIP_MAGIC):
        for image in unpack_bytes(data, app_id):
            dex = parse_dex(image)
            result.diagnostics.extend(dex.diagnostics)
            result.edges.extend(extract_call_edges(dex, app_id, result.diagnostics))
            result.classes.extend(summarize_classes(dex))
        return result
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise NoDexFound(f"{app_id}: not a DEX, APK or UTF-8 call log") from None
    result.edges = parse_call_log(text, app_id)
    seen = sorted({e.caller_class for e in result.edges} | {e.callee.class_descriptor for e in result.edges})
    result.classes = [ClassSummary(d) for d in seen]
    return result


@dataclass
class ScanOutcome:
    app_id: str
    status: str  # ok | skipped | failed
    digest: str | None = None
    message: str = ""
    cached: bool = False
    result: ScanResult | None = None

    def index_entry(self) -> dict:
        return {"status": self.status, "digest": self.digest, "message": self.message}


def scan_app(app: AppRecord, path: Path, cache: ScanCache | None = None) -> ScanOutcome:
    try:
        data = path.read_bytes()
    except OSError as exc:
        return ScanOutcome(app.app_id, "skipped", message=f"unreadable source: {exc.strerror or exc}")
    digest = digest_bytes(data)
    if cache is not None:
        hit = cache.get(digest, app.app_id)
        if hit is not None:
            return ScanOutcome(app.app_id, "ok", digest, cached=True, result=hit)
    try:
        result = scan_bytes(app.app_id, data)
    except AdscopeError as exc:
        return ScanOutcome(app.app_id, "failed", digest, message=f"{type(exc).__name__}: {exc}")
    if cache is not None:
        cache.put(result)
    return ScanOutcome(app.app_id, "ok", digest, result=result)


def _scan_job(job: tuple[AppRecord, str, str | None]) -> ScanOutcome:
    app, path, cache_root = job
    return scan_app(app, Path(path), ScanCache(cache_root) if cache_root else None)


def scan_corpus(manifest: CorpusManifest, cache: ScanCache | None = None, workers: int = 1) -> list[ScanOutcome]:
    """Scan every app; outcomes come back in manifest order whatever the worker count."""
    jobs = [(app, str(manifest.resolve(app)), str(cache.root) if cache else None) for app in manifest.apps]
    if workers <= 1 or len(jobs) <= 1:
        return [_scan_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_scan_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def load_scans(manifest: CorpusManifest, cache: ScanCache) -> tuple[list[ScanResult], dict[str, dict]]:
    """Scan results for every app the index marks ok, in manifest order."""
    index = cache.read_index()
    if index is None:
        raise MissingCache(f"no scan index in {cache.root}; run `adscope scan` first")
    results = []
    for app in manifest.apps:
        entry = index.get(app.app_id)
        if entry is None:
            raise MissingCache(f"app {app.app_id!r} missing from scan index; rescan")
        if entry["status"] != "ok":
            continue
        res = cache.get(entry["digest"], app.app_id)
        if res is None:
            raise MissingCache(f"cache object for {app.app_id!r} ({entry['digest'][:12]}) is missing")
        results.append(res)
    return results, index


# --- analysis --------------------------------------------------------------

@dataclass
class AppAnalysis:
    app_id: str
    hits: list[LibraryHit]
    libraries: frozenset[str]
    split: EdgeSplit


def analyze_app(result: ScanResult, registry: Registry, threshold: float = DEFAULT_THRESHOLD) -> AppAnalysis:
    fp_hits = detect_obfuscated(result.app_id, result.classes, registry, threshold)
    index = registry.index.extended(fp_hits, registry.canonical_roots())
    descriptors = [c.descriptor for c in result.classes]
    descriptors += [e.caller_class for e in result.edges] + [e.callee.class_descriptor for e in result.edges]
    hits = prefix_hits(result.app_id, descriptors, registry.index)
    names = {h.canonical_name for h in hits}
    hits += [h for h in fp_hits if h.canonical_name not in names]
    split = split_edges(result.edges, index)
    return AppAnalysis(result.app_id, hits, frozenset(h.canonical_name for h in hits), split)


@dataclass
class CorpusAnalysis:
    apps: list[AppRecord]
    per_app: list[AppAnalysis]
    working_apis: dict[str, apirecon.WorkingApi]
    classified: ClassifiedApi
    shares: list[report.MarketShare]
    leak_libraries: list[str]
    settings: dict = field(default_factory=dict)

    def calls(self):
        for a in self.per_app:
            yield from a.split.app_to_lib

    def hits(self) -> list[LibraryHit]:
        return [h for a in self.per_app for h in a.hits]


def analyze_corpus(results: Sequence[ScanResult], records: Sequence[AppRecord], registry: Registry,
                   ruleset: Ruleset, threshold: float = DEFAULT_THRESHOLD, top_n: int = 20) -> CorpusAnalysis:
    by_id = {r.app_id: r for r in records}
    apps = [by_id[r.app_id] for r in results]
    per_app = [analyze_app(r, registry, threshold) for r in results]
    working = apirecon.reconstruct_streaming(a.split.app_to_lib for a in per_app)
    classified = classify(working, ruleset)
    shares = report.market_share([h for a in per_app for h in a.hits], len(apps), top_n)
    return CorpusAnalysis(
        apps, per_app, working, classified, shares, report.top_libraries(shares),
        {"fingerprint_threshold": threshold, "top_n": top_n, "registry_version": registry.version},
    )


def build_tables(analysis: CorpusAnalysis, ruleset: Ruleset,
                 permissions: Sequence[report.PermissionRow] | None = None) -> dict[str, report.ReportTable]:
    apps = analysis.apps
    calls = list(analysis.calls())
    libs = analysis.leak_libraries
    unknown = sum(a.install_bucket_lower is None for a in apps)
    total_installs = sum(a.install_bucket_lower or 0 for a in apps)
    tables = {
        "market_share": report.market_share_table(analysis.shares, len(apps)),
        "category_usage": report.category_usage_table(
            report.category_usage(analysis.classified, calls, apps, libs), len(apps), total_installs, unknown),
        "bucket_profile": report.bucket_profile_table(
            report.bucket_profile(analysis.classified, calls, apps, libs), unknown),
        "per_library": report.per_library_rows(report.per_library_table(
            analysis.classified, calls, {a.app_id: a.libraries for a in analysis.per_app}, libs)),
        "corpus_summary": report.corpus_summary_table(report.corpus_summary(apps), unknown),
        "api_size": report.api_size_table(apirecon.api_size_distribution(analysis.working_apis)),
    }
    for name in ("category_usage", "bucket_profile", "per_library"):
        tables[name].metadata["leak_libraries"] = list(libs)
    tables["category_usage"].metadata["lib_to_lib_edges_excluded"] = sum(
        len(a.split.lib_to_lib) for a in analysis.per_app)
    if permissions is not None:
        derived = {r.library: len(ruleset.categories_for(r.library)) for r in permissions}
        tables["correlation"] = report.correlation_table(permissions, derived)
    return tables


def write_outputs(analysis: CorpusAnalysis, tables: dict[str, report.ReportTable], out_dir: str | os.PathLike,
                  fmt: str = "csv", run_meta: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    meta = dict(analysis.settings)
    meta.update(run_meta or {})
    written = report.write_tables(tables, out, fmt, meta)
    plot = {str(r["bucket_lower"]): r["mean_keys_per_app"] for r in tables["bucket_profile"].rows}
    path = out / "bucket_profile_plot.json"
    path.write_text(json.dumps(plot, indent=1) + "\n", encoding="utf-8")
    written.append(path)
    path = out / f"working_api.{fmt}"
    path.write_text(apirecon.to_json(analysis.working_apis) if fmt == "json"
                    else apirecon.to_csv(analysis.working_apis), encoding="utf-8")
    written.append(path)
    return written


def scan_in_memory(manifest: CorpusManifest) -> list[ScanResult]:
    """Cache-free scan, used as the reference for cache transparency."""
    return [o.result for o in scan_corpus(manifest) if o.status == "ok"]


def summarize_outcomes(outcomes: Iterable[ScanOutcome]) -> dict[str, int]:
    counts = {"ok": 0, "skipped": 0, "failed": 0, "cached": 0}
    for o in outcomes:
        counts[o.status] += 1
        counts["cached"] += o.cached
    return counts
