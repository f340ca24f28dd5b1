"""Ad/analytics library identification: package prefixes, structural fingerprints, edge splitting."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import AmbiguousRegistry, EmptyPackage, RegistrySyntax
from .model import CallEdge, ClassSummary, class_to_dotted, dotted_to_class

DEFAULT_THRESHOLD = 0.8
_PREFIX_RE = re.compile(r"[A-Za-z_$][\w$]*(?:\.[A-Za-z_$][\w$]*)*")

Signature = tuple[tuple[int, str], ...]


@dataclass(frozen=True)
class LibraryFingerprint:
    class_signatures: frozenset[Signature]
    anchor_strings: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        return {
            "class_signatures": sorted([list(p) for p in sig] for sig in self.class_signatures),
            "anchor_strings": sorted(self.anchor_strings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LibraryFingerprint":
        sigs = frozenset(tuple((int(n), str(k)) for n, k in sig) for sig in obj["class_signatures"])
        return cls(sigs, frozenset(obj.get("anchor_strings", ())))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LibraryFingerprint":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class LibrarySpec:
    canonical_name: str
    package_prefixes: tuple[str, ...] = ()
    fingerprint: LibraryFingerprint | None = None
    notes: str = ""

    def __post_init__(self):
        if not self.package_prefixes and self.fingerprint is None:
            raise ValueError(f"{self.canonical_name}: needs a package prefix or a fingerprint")
        for p in self.package_prefixes:
            if not _PREFIX_RE.fullmatch(p):
                raise ValueError(f"{self.canonical_name}: invalid package prefix {p!r}")


@dataclass(frozen=True)
class LibraryHit:
    app_id: str
    canonical_name: str
    matched_by: str  # "prefix" | "fingerprint"
    matched_prefix: str | None = None
    match_score: float | None = None


class PrefixIndex:
    """Longest-prefix lookup from dotted package prefixes to canonical library names.

    Prefixes match on package-component boundaries: ``com.admob`` matches
    ``com.admob.android.ads.View`` but not ``com.admobile.X``.
    """

    def __init__(self, prefixes: dict[str, str], renamed: dict[str, str] | None = None):
        self._prefixes = dict(prefixes)
        # obfuscated root -> canonical root used when normalizing callee classes
        self._renamed = dict(renamed or {})
        self._depths = sorted({p.count(".") + 1 for p in self._prefixes}, reverse=True)

    @property
    def prefixes(self) -> dict[str, str]:
        return dict(self._prefixes)

    def lookup(self, descriptor: str) -> tuple[str, str] | None:
        """(matched prefix, canonical name) for a class descriptor, or None."""
        dotted = class_to_dotted(descriptor)
        if dotted is None:
            return None
        parts = dotted.split(".")
        for depth in self._depths:
            if depth > len(parts):
                continue
            prefix = ".".join(parts[:depth])
            name = self._prefixes.get(prefix)
            if name is not None:
                return prefix, name
        return None

    def match(self, descriptor: str) -> str | None:
        found = self.lookup(descriptor)
        return None if found is None else found[1]

    def normalize(self, descriptor: str) -> str:
        """Rewrite a class under a fingerprint-matched root onto the library's canonical root."""
        found = self.lookup(descriptor)
        if found is None or found[0] not in self._renamed:
            return descriptor
        root, _ = found
        dotted = class_to_dotted(descriptor)
        return dotted_to_class(self._renamed[root] + dotted[len(root):])

    def extended(self, hits: Iterable[LibraryHit], canonical_roots: dict[str, str]) -> "PrefixIndex":
        prefixes = dict(self._prefixes)
        renamed = dict(self._renamed)
        for hit in hits:
            if hit.matched_by != "fingerprint" or hit.matched_prefix is None:
                continue
            prefixes[hit.matched_prefix] = hit.canonical_name
            renamed[hit.matched_prefix] = canonical_roots[hit.canonical_name]
        return PrefixIndex(prefixes, renamed)


class Registry:
    """Immutable set of known libraries with a precomputed prefix index."""

    def __init__(self, specs: Iterable[LibrarySpec], version: str = ""):
        merged: dict[str, LibrarySpec] = {}
        for spec in specs:
            old = merged.get(spec.canonical_name)
            if old is None:
                merged[spec.canonical_name] = spec
                continue
            if old.fingerprint and spec.fingerprint and old.fingerprint != spec.fingerprint:
                raise AmbiguousRegistry(f"{spec.canonical_name}: two different fingerprints")
            prefixes = tuple(dict.fromkeys(old.package_prefixes + spec.package_prefixes))
            merged[spec.canonical_name] = LibrarySpec(
                spec.canonical_name, prefixes, old.fingerprint or spec.fingerprint,
                "; ".join(n for n in (old.notes, spec.notes) if n))
        owner: dict[str, str] = {}
        for spec in merged.values():
            for prefix in spec.package_prefixes:
                other = owner.setdefault(prefix, spec.canonical_name)
                if other != spec.canonical_name:
                    raise AmbiguousRegistry(f"prefix {prefix!r} claimed by both {other} and {spec.canonical_name}")
        self.specs = tuple(merged.values())
        self.by_name = dict(merged)
        self.index = PrefixIndex(owner)
        self.version = version

    def __contains__(self, name: str) -> bool:
        return name in self.by_name

    def names(self) -> list[str]:
        return [s.canonical_name for s in self.specs]

    def fingerprinted(self) -> list[LibrarySpec]:
        return [s for s in self.specs if s.fingerprint is not None]

    def canonical_roots(self) -> dict[str, str]:
        """Root each library's renamed copies are normalized onto."""
        return {
            s.canonical_name: s.package_prefixes[0] if s.package_prefixes else "obfuscated." + _safe(s.canonical_name)
            for s in self.specs
        }


def _safe(name: str) -> str:
    return re.sub(r"\W", "_", name).lower() or "lib"


def parse_registry(text: str, base_dir: Path | None = None, version: str = "") -> Registry:
    """Registry records: ``name<TAB>prefix,prefix<TAB>[fingerprint path]<TAB>[notes]``."""
    specs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) < 2 or not cols[0]:
            raise RegistrySyntax("expected name and prefixes", lineno)
        name = cols[0]
        prefixes = tuple(p.strip() for p in cols[1].split(",") if p.strip() and p.strip() != "-")
        fingerprint = None
        if len(cols) > 2 and cols[2] and cols[2] != "-":
            fp_path = Path(cols[2])
            if not fp_path.is_absolute() and base_dir is not None:
                fp_path = base_dir / fp_path
            try:
                fingerprint = LibraryFingerprint.load(fp_path)
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise RegistrySyntax(f"cannot load fingerprint {cols[2]!r}: {exc}", lineno) from None
        notes = cols[3] if len(cols) > 3 else ""
        try:
            specs.append(LibrarySpec(name, prefixes, fingerprint, notes))
        except ValueError as exc:
            raise RegistrySyntax(str(exc), lineno) from None
    return Registry(specs, version)


def load_registry(path: str | os.PathLike) -> Registry:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_registry(text, path.parent, version=_version_comment(text))


def default_registry() -> Registry:
    text = resources.files("adscope").joinpath("data/registry.tsv").read_text(encoding="utf-8")
    return parse_registry(text, version=_version_comment(text))


def _version_comment(text: str) -> str:
    m = re.search(r"^#\s*version\s*:\s*(\S+)", text, re.M)
    return m.group(1) if m else ""


def match_library(class_descriptor: str, registry: Registry) -> str | None:
    return registry.index.match(class_descriptor)


# --- fingerprints ----------------------------------------------------------

def fingerprint_from_summaries(classes: Iterable[ClassSummary]) -> LibraryFingerprint:
    sigs = set()
    anchors: set[str] = set()
    for c in classes:
        if c.signature is None:
            continue
        sigs.add(c.signature)
        anchors.update(c.strings)
    if not sigs:
        raise EmptyPackage("no classes with structural information")
    return LibraryFingerprint(frozenset(sigs), frozenset(anchors))


def in_package(descriptor: str, package_root: str) -> bool:
    dotted = class_to_dotted(descriptor)
    return dotted is not None and dotted.startswith(package_root + ".")


def fingerprint_classes(dex, package_root: str) -> LibraryFingerprint:
    """Rename-invariant fingerprint of every class under ``package_root`` in a parsed DEX."""
    from .dexparse import summarize_classes

    chosen = [c for c in summarize_classes(dex) if in_package(c.descriptor, package_root)]
    if not chosen:
        raise EmptyPackage(f"no classes under {package_root!r}")
    return fingerprint_from_summaries(chosen)


def _jaccard(a: frozenset, b: frozenset) -> Fraction:
    union = len(a | b)
    return Fraction(len(a & b), union) if union else Fraction(1)


def similarity(a: LibraryFingerprint, b: LibraryFingerprint) -> float:
    """Mean of class-signature and anchor-string Jaccard; class Jaccard alone when neither has anchors."""
    score = _jaccard(a.class_signatures, b.class_signatures)
    if a.anchor_strings or b.anchor_strings:
        score = (score + _jaccard(a.anchor_strings, b.anchor_strings)) / 2
    return float(score)


def detect_obfuscated(app_id: str, classes: Iterable[ClassSummary], registry: Registry,
                      threshold: float = DEFAULT_THRESHOLD) -> list[LibraryHit]:
    """Find renamed copies of fingerprinted libraries among classes no prefix claims.

    Every ancestor package of an unclaimed class is a candidate root; for each
    fingerprinted library the best-scoring root at or above ``threshold`` wins,
    preferring the deepest root on ties.
    """
    specs = registry.fingerprinted()
    if not specs:
        return []
    sigs: dict[str, set] = {}
    anchors: dict[str, set] = {}
    for c in classes:
        if c.signature is None or registry.index.match(c.descriptor) is not None:
            continue
        dotted = class_to_dotted(c.descriptor)
        if dotted is None:
            continue
        parts = dotted.split(".")[:-1]
        for depth in range(1, len(parts) + 1):
            root = ".".join(parts[:depth])
            sigs.setdefault(root, set()).add(c.signature)
            anchors.setdefault(root, set()).update(c.strings)
    candidates = {root: LibraryFingerprint(frozenset(sigs[root]), frozenset(anchors[root])) for root in sigs}

    hits = []
    for spec in specs:
        best = None
        for root in sorted(candidates):
            score = similarity(candidates[root], spec.fingerprint)
            if score < threshold:
                continue
            key = (score, root.count("."))
            if best is None or key > best[0]:
                best = (key, root)
        if best is not None:
            hits.append(LibraryHit(app_id, spec.canonical_name, "fingerprint", best[1], best[0][0]))
    return hits


def prefix_hits(app_id: str, descriptors: Iterable[str], index: PrefixIndex) -> list[LibraryHit]:
    """One hit per library whose prefix claims at least one of the given classes."""
    found: dict[str, str] = {}
    for desc in descriptors:
        got = index.lookup(desc)
        if got is not None:
            prefix, name = got
            if name not in found or prefix < found[name]:
                found[name] = prefix
    return [LibraryHit(app_id, name, "prefix", prefix) for name, prefix in sorted(found.items())]


# --- edge splitting --------------------------------------------------------

@dataclass(frozen=True)
class LibraryCall:
    """An app->library edge tagged with the callee's library; callee class normalized."""

    library: str
    edge: CallEdge


@dataclass
class EdgeSplit:
    app_to_lib: list[LibraryCall] = field(default_factory=list)
    lib_to_lib: list[CallEdge] = field(default_factory=list)
    app_internal: list[CallEdge] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.app_to_lib) + len(self.lib_to_lib) + len(self.app_internal)


def split_edges(edges: Iterable[CallEdge], index: PrefixIndex) -> EdgeSplit:
    """Partition edges by whether caller and callee classes belong to a library.

    Calls from any library into any library (including itself) are lib_to_lib;
    those never reach a leak statistic.
    """
    out = EdgeSplit()
    for edge in edges:
        callee_lib = index.match(edge.callee.class_descriptor)
        if callee_lib is None:
            out.app_internal.append(edge)
        elif index.match(edge.caller_class) is not None:
            out.lib_to_lib.append(edge)
        else:
            normalized = index.normalize(edge.callee.class_descriptor)
            if normalized != edge.callee.class_descriptor:
                edge = CallEdge(edge.app_id, edge.caller_class, edge.callee.with_class(normalized), edge.invoke_kind)
            out.app_to_lib.append(LibraryCall(callee_lib, edge))
    return out
