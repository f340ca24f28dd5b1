"""Corpus manifests, the call-log text frontend, container unpacking and the scan cache."""

from __future__ import annotations

import datetime as _dt
import hashlib
import io
import json
import os
import re
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

from .errors import ArchiveCorrupt, DuplicateAppId, ManifestSyntax, NoDexFound, RecordSyntax
from .model import CallEdge, ClassSummary, Diagnostic, InvokeKind, MethodRef, is_type_descriptor

CANONICAL_BUCKETS = (
    0, 1, 5, 10, 50, 100, 500, 1000, 5000, 10000, 50000, 100000, 500000,
    1000000, 5000000, 10000000, 50000000, 100000000,
)
UNKNOWN_BUCKET_WORDS = {"unknown", "?", "-", "na", "n/a"}

_RANGE_SPLIT = re.compile(r"\s*[–—-]\s*")
_HEADER_KEYS = {"registry_version", "created"}


@dataclass(frozen=True)
class AppRecord:
    app_id: str
    source: str
    install_bucket_lower: int | None  # None = unknown
    metadata: tuple[tuple[str, str], ...] = ()


@dataclass
class CorpusManifest:
    apps: list[AppRecord] = field(default_factory=list)
    registry_version: str = ""
    created: str = ""
    base_dir: Path | None = None  # relative sources resolve against this

    def resolve(self, app: AppRecord) -> Path:
        path = Path(app.source)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    def __len__(self) -> int:
        return len(self.apps)


def parse_install_bucket(text: str) -> int | None:
    """Lower bound of a store install bucket: ``"5,000 – 10,000"`` -> 5000.

    Accepts a plain integer, a range, or a trailing ``+``; returns None for unknown.
    """
    raw = text.strip()
    if raw.lower() in UNKNOWN_BUCKET_WORDS or raw == "":
        return None
    lower = _RANGE_SPLIT.split(raw, maxsplit=1)[0].rstrip("+").replace(",", "").strip()
    if not lower.isdigit():
        raise ValueError(f"unparseable install bucket {text!r}")
    value = int(lower)
    if value not in CANONICAL_BUCKETS:
        raise ValueError(f"{value} is not a canonical bucket lower bound")
    return value


def parse_manifest(text: str, base_dir: Path | None = None) -> CorpusManifest:
    manifest = CorpusManifest(base_dir=base_dir)
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            m = re.match(r"#\s*(\w+)\s*:\s*(.*)$", stripped)
            if m and m.group(1) in _HEADER_KEYS:
                setattr(manifest, "registry_version" if m.group(1) == "registry_version" else "created",
                        m.group(2).strip())
            continue
        cols = line.rstrip("\r\n").split("\t")
        if len(cols) < 3:
            raise ManifestSyntax(f"expected at least 3 tab-separated fields, got {len(cols)}", lineno)
        app_id, source, bucket = cols[0].strip(), cols[1].strip(), cols[2]
        if not app_id:
            raise ManifestSyntax("empty app_id", lineno, "app_id")
        if not source:
            raise ManifestSyntax("empty source", lineno, "source")
        try:
            lower = parse_install_bucket(bucket)
        except ValueError as exc:
            raise ManifestSyntax(str(exc), lineno, "install_bucket") from None
        extra = []
        for kv in cols[3:]:
            kv = kv.strip()
            if not kv:
                continue
            if "=" not in kv:
                raise ManifestSyntax(f"metadata {kv!r} is not key=value", lineno, "metadata")
            key, value = kv.split("=", 1)
            extra.append((key.strip(), value.strip()))
        if app_id in seen:
            raise DuplicateAppId(f"line {lineno}: app_id {app_id!r} appears more than once")
        seen.add(app_id)
        manifest.apps.append(AppRecord(app_id, source, lower, tuple(extra)))
    return manifest


def load_manifest(path: str | os.PathLike) -> CorpusManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


def dump_manifest(manifest: CorpusManifest) -> str:
    lines = []
    if manifest.registry_version:
        lines.append(f"# registry_version: {manifest.registry_version}")
    if manifest.created:
        lines.append(f"# created: {manifest.created}")
    for app in manifest.apps:
        bucket = "unknown" if app.install_bucket_lower is None else str(app.install_bucket_lower)
        cols = [app.app_id, app.source, bucket] + [f"{k}={v}" for k, v in app.metadata]
        lines.append("\t".join(cols))
    return "\n".join(lines) + ("\n" if lines else "")


def write_manifest(manifest: CorpusManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_manifest(manifest), encoding="utf-8")


def new_manifest(apps: Iterable[AppRecord], registry_version: str = "") -> CorpusManifest:
    created = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return CorpusManifest(list(apps), registry_version, created)


# --- call-log frontend -----------------------------------------------------

def parse_call_log(stream: TextIO | str, app_id: str) -> list[CallEdge]:
    """Read call-log records into CallEdges shaped exactly like DEX-derived ones.

    Columns (tab or whitespace separated): caller class, callee class, method
    name, method descriptor, optional invoke kind (default virtual).
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    edges = []
    for lineno, line in enumerate(stream, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        cols = stripped.split()
        if len(cols) not in (4, 5):
            raise RecordSyntax(f"expected 4 or 5 fields, got {len(cols)}", lineno)
        caller, callee_class, name, descriptor = cols[:4]
        for col in (caller, callee_class):
            if not is_type_descriptor(col) or not col.startswith(("L", "[")):
                raise RecordSyntax(f"bad class descriptor {col!r}", lineno)
        try:
            ref = MethodRef.from_parts(callee_class, name, descriptor)
        except ValueError:
            raise RecordSyntax(f"bad method descriptor {descriptor!r}", lineno) from None
        try:
            kind = InvokeKind.parse(cols[4]) if len(cols) == 5 else InvokeKind.VIRTUAL
        except ValueError:
            raise RecordSyntax(f"unknown invoke kind {cols[4]!r}", lineno) from None
        edges.append(CallEdge(app_id, caller, ref, kind))
    return edges


def format_call_log(edges: Iterable[CallEdge]) -> str:
    return "".join(
        f"{e.caller_class}\t{e.callee.class_descriptor}\t{e.callee.method_name}\t"
        f"{e.callee.descriptor}\t{e.invoke_kind.value}\n"
        for e in edges
    )


# --- containers ------------------------------------------------------------

DEX_MAGIC = b"dex\n"
ZIP_MAGIC = b"PK\x03\x04"
_DEX_ENTRY = re.compile(r"classes(\d*)\.dex")


def _dex_entry_order(name: str) -> int | None:
    m = _DEX_ENTRY.fullmatch(name)
    if m is None:
        return None
    return int(m.group(1)) if m.group(1) else 1


def unpack_bytes(data: bytes, label: str = "<bytes>") -> list[bytes]:
    if data.startswith(DEX_MAGIC):
        return [data]
    if not data.startswith(ZIP_MAGIC):
        raise NoDexFound(f"{label}: neither a DEX file nor a zip archive")
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            entries = sorted(
                (order, info.filename)
                for info in zf.infolist()
                if (order := _dex_entry_order(info.filename)) is not None
            )
            if not entries:
                raise NoDexFound(f"{label}: archive has no classes*.dex entries")
            return [zf.read(name) for _, name in entries]
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, OSError, ValueError) as exc:
        raise ArchiveCorrupt(f"{label}: {exc}") from None
    except NotImplementedError as exc:  # unsupported compression
        raise ArchiveCorrupt(f"{label}: {exc}") from None


def unpack_container(path: str | os.PathLike) -> list[bytes]:
    """Every DEX image in a raw .dex or an APK, ordered classes.dex, classes2.dex, ..."""
    path = Path(path)
    return unpack_bytes(path.read_bytes(), str(path))


# --- scan results and cache ------------------------------------------------

SCAN_FORMAT = 1


@dataclass
class ScanResult:
    """Everything the report stage needs from one app, independent of any registry."""

    app_id: str
    digest: str
    edges: list[CallEdge] = field(default_factory=list)
    classes: list[ClassSummary] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def to_json(self) -> dict:
        # app_id is not stored: identical content under two ids shares one entry
        return {
            "format": SCAN_FORMAT,
            "digest": self.digest,
            "edges": [
                [e.caller_class, e.callee.class_descriptor, e.callee.method_name,
                 list(e.callee.param_descriptors), e.callee.return_descriptor, e.invoke_kind.value]
                for e in self.edges
            ],
            "classes": [
                [c.descriptor, None if c.signature is None else [list(s) for s in c.signature], list(c.strings)]
                for c in self.classes
            ],
            "diagnostics": [[d.kind, d.where, d.message] for d in self.diagnostics],
        }

    @classmethod
    def from_json(cls, app_id: str, obj: dict) -> "ScanResult":
        edges = [
            CallEdge(app_id, caller, MethodRef(klass, name, tuple(params), ret), InvokeKind(kind))
            for caller, klass, name, params, ret, kind in obj["edges"]
        ]
        classes = [
            ClassSummary(desc, None if sig is None else tuple((int(n), str(k)) for n, k in sig), tuple(strings))
            for desc, sig, strings in obj["classes"]
        ]
        diags = [Diagnostic(*d) for d in obj["diagnostics"]]
        return cls(app_id, obj["digest"], edges, classes, diags)


def digest_bytes(data: bytes) -> str:
    h = hashlib.sha256()
    h.update(f"adscope-scan-v{SCAN_FORMAT}\0".encode())
    h.update(data)
    return h.hexdigest()


class ScanCache:
    """Content-addressed store of scan results keyed by source digest.

    Writes go through a temp file and an atomic rename, so concurrent readers
    never observe a partial entry.
    """

    INDEX = "scan-index.json"

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _path(self, digest: str) -> Path:
        return self.root / "objects" / digest[:2] / f"{digest}.json"

    def get(self, digest: str, app_id: str) -> ScanResult | None:
        path = self._path(digest)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError):
            return None
        if obj.get("format") != SCAN_FORMAT or obj.get("digest") != digest:
            return None
        return ScanResult.from_json(app_id, obj)

    def put(self, result: ScanResult) -> None:
        self._atomic_write(self._path(result.digest), json.dumps(result.to_json(), separators=(",", ":")))

    def _atomic_write(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def write_index(self, entries: dict[str, dict]) -> None:
        self._atomic_write(self.root / self.INDEX, json.dumps(entries, indent=1, sort_keys=True))

    def read_index(self) -> dict[str, dict] | None:
        try:
            return json.loads((self.root / self.INDEX).read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
