"""Command-line driver: scan, report, suggest-rules, fingerprint, validate."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import pipeline, report
from .dexparse import parse_dex
from .errors import AdscopeError, ConfigError, EmptyPackage, MissingCache, MissingFixture, UnknownLibrary
from .ingest import ScanCache, load_manifest, unpack_container
from .libid import DEFAULT_THRESHOLD, LibraryFingerprint, Registry, default_registry, fingerprint_classes, load_registry
from .privclass import format_rules, load_ruleset, suggest_rules

log = logging.getLogger("adscope")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
DEFAULT_CACHE_DIR = ".adscope-cache"


@dataclass
class RunConfig:
    manifest: Path | None = None
    registry: Path | None = None  # None = packaged top-20 registry
    rules: list[Path] = field(default_factory=list)
    overrides: list[Path] = field(default_factory=list)
    no_default_rules: bool = False
    cache_dir: Path = Path(DEFAULT_CACHE_DIR)
    out_dir: Path = Path("adscope-out")
    threshold: float = DEFAULT_THRESHOLD
    top: int = 20
    workers: int = 1
    fmt: str = "csv"
    permissions: Path | None = None

    def validate(self, need_manifest: bool = True) -> None:
        if not 0 < self.threshold <= 1:
            raise ConfigError(f"--threshold must be in (0, 1], got {self.threshold}")
        if self.top < 1:
            raise ConfigError(f"--top must be >= 1, got {self.top}")
        if self.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {self.workers}")
        if self.fmt not in ("csv", "json"):
            raise ConfigError(f"--format must be csv or json, got {self.fmt}")
        if need_manifest:
            if self.manifest is None:
                raise ConfigError("--manifest is required")
            if not self.manifest.is_file():
                raise ConfigError(f"manifest {self.manifest} does not exist")
        for p in [self.registry, *self.rules, *self.overrides]:
            if p is not None and not p.is_file():
                raise ConfigError(f"{p} does not exist")

    def load_registry(self) -> Registry:
        return default_registry() if self.registry is None else load_registry(self.registry)

    def load_ruleset(self):
        return load_ruleset(self.rules, self.overrides, include_default=not self.no_default_rules)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path)
    p.add_argument("--registry", type=Path, help="library registry file (default: packaged top-20)")
    p.add_argument("--rules", type=Path, action="append", default=[], help="extra shipped-rule file (repeatable)")
    p.add_argument("--overrides", type=Path, action="append", default=[], help="user override rule file (repeatable)")
    p.add_argument("--no-default-rules", action="store_true", help="do not load the packaged ruleset")
    p.add_argument("--cache-dir", type=Path, help="scan cache (default: $ADSCOPE_CACHE_DIR or ./.adscope-cache)")
    p.add_argument("--out-dir", type=Path, default=Path("adscope-out"))
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD, help="fingerprint match threshold")
    p.add_argument("--top", type=int, default=20, help="libraries kept in leak statistics")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--format", dest="fmt", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adscope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="parse every app in the manifest into the scan cache")
    _common(p)

    p = sub.add_parser("report", help="compute all corpus reports from the scan cache")
    _common(p)
    p.add_argument("--permissions", type=Path, help="per-library permission table (default: packaged)")
    p.add_argument("--no-correlation", action="store_true")

    p = sub.add_parser("suggest-rules", help="heuristic rule suggestions for one library")
    _common(p)
    p.add_argument("library")

    p = sub.add_parser("fingerprint", help="build a structural fingerprint from a reference DEX/APK")
    p.add_argument("source", type=Path)
    p.add_argument("package", help="dotted package root, e.g. com.airpush")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("validate", help="lint manifest, registry and rule files")
    _common(p)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cache = args.cache_dir or os.environ.get("ADSCOPE_CACHE_DIR") or DEFAULT_CACHE_DIR
    return RunConfig(
        manifest=args.manifest, registry=args.registry, rules=list(args.rules), overrides=list(args.overrides),
        no_default_rules=args.no_default_rules, cache_dir=Path(cache), out_dir=args.out_dir,
        threshold=args.threshold, top=args.top, workers=args.workers, fmt=args.fmt,
        permissions=getattr(args, "permissions", None),
    )


def cmd_scan(config: RunConfig) -> int:
    config.validate()
    manifest = load_manifest(config.manifest)
    cache = ScanCache(config.cache_dir)
    outcomes = pipeline.scan_corpus(manifest, cache, config.workers)
    cache.write_index({o.app_id: o.index_entry() for o in outcomes})
    for o in outcomes:
        if o.status == "skipped":
            log.warning("skipped %s: %s", o.app_id, o.message)
        elif o.status == "failed":
            log.error("failed %s: %s", o.app_id, o.message)
        elif o.result.diagnostics:
            log.info("%s: %d diagnostics", o.app_id, len(o.result.diagnostics))
    counts = pipeline.summarize_outcomes(outcomes)
    log.info("scan: %(ok)d ok (%(cached)d cached), %(skipped)d skipped, %(failed)d failed", counts)
    return EXIT_FAILURE if counts["failed"] else EXIT_OK


def _analysis(config: RunConfig):
    config.validate()
    manifest = load_manifest(config.manifest)
    registry = config.load_registry()
    ruleset = config.load_ruleset()
    results, index = pipeline.load_scans(manifest, ScanCache(config.cache_dir))
    analysis = pipeline.analyze_corpus(results, manifest.apps, registry, ruleset, config.threshold, config.top)
    return manifest, registry, ruleset, analysis, index


def cmd_report(config: RunConfig, correlation: bool = True) -> int:
    manifest, registry, ruleset, analysis, index = _analysis(config)
    permissions = report.load_permission_table(config.permissions) if correlation else None
    tables = pipeline.build_tables(analysis, ruleset, permissions)
    statuses = [e["status"] for e in index.values()]
    run_meta = {
        "apps_in_manifest": len(manifest.apps),
        "apps_analyzed": len(analysis.apps),
        "apps_skipped": statuses.count("skipped"),
        "apps_failed": statuses.count("failed"),
        "rules_loaded": len(ruleset),
    }
    written = pipeline.write_outputs(analysis, tables, config.out_dir, config.fmt, run_meta)
    log.info("wrote %d files to %s", len(written), config.out_dir)
    return EXIT_OK


def cmd_suggest_rules(config: RunConfig, library: str) -> str:
    manifest, registry, ruleset, analysis, _ = _analysis(config)
    if library not in registry:
        raise UnknownLibrary(f"unknown library {library!r}; known: {', '.join(registry.names())}")
    api = analysis.working_apis.get(library)
    if api is None:
        return ""
    suggestions = suggest_rules(library, api, ruleset)
    if not suggestions:
        return ""
    header = f"# heuristic suggestions for {library}; review before promoting to a rules file\n"
    return header + format_rules(rule for rule, _ in suggestions)


def cmd_fingerprint(source: Path, package: str, output: Path) -> int:
    fps = []
    for image in unpack_container(source):
        try:
            fps.append(fingerprint_classes(parse_dex(image), package))
        except EmptyPackage:
            continue
    if not fps:
        raise EmptyPackage(f"no classes under {package!r} in {source}")
    merged = LibraryFingerprint(frozenset().union(*(f.class_signatures for f in fps)),
                                frozenset().union(*(f.anchor_strings for f in fps)))
    merged.save(output)
    log.info("fingerprint: %d class signatures, %d anchor strings -> %s",
             len(merged.class_signatures), len(merged.anchor_strings), output)
    return EXIT_OK


def cmd_validate(config: RunConfig) -> int:
    config.validate(need_manifest=False)
    if config.manifest is not None:
        m = load_manifest(config.manifest)
        missing = [a.app_id for a in m.apps if not m.resolve(a).exists()]
        print(f"manifest: {len(m.apps)} apps, {len(missing)} unresolvable sources")
    reg = config.load_registry()
    print(f"registry: {len(reg.specs)} libraries, {len(reg.index.prefixes)} prefixes, "
          f"{len(reg.fingerprinted())} fingerprinted")
    rules = config.load_ruleset()
    unknown = sorted({r.library for r in rules if r.library != "*" and r.library not in reg})
    print(f"rules: {len(rules)} loaded")
    for name in unknown:
        print(f"warning: rules reference library {name!r} not in registry")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fingerprint":
            return cmd_fingerprint(args.source, args.package, args.output)
        config = config_from_args(args)
        if args.command == "scan":
            return cmd_scan(config)
        if args.command == "report":
            return cmd_report(config, correlation=not args.no_correlation)
        if args.command == "suggest-rules":
            text = cmd_suggest_rules(config, args.library)
            sys.stdout.write(text)
            return EXIT_OK
        if args.command == "validate":
            return cmd_validate(config)
    except ConfigError as exc:
        print(f"adscope: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingCache, MissingFixture) as exc:
        print(f"adscope: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except AdscopeError as exc:
        print(f"adscope: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"adscope: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
