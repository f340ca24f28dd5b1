import io
import random
import zipfile
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adscope.dexparse import extract_call_edges, parse_dex
from adscope.errors import ArchiveCorrupt, DuplicateAppId, ManifestSyntax, NoDexFound, RecordSyntax
from adscope.ingest import (
    AppRecord,
    ScanCache,
    ScanResult,
    dump_manifest,
    format_call_log,
    load_manifest,
    parse_call_log,
    parse_install_bucket,
    parse_manifest,
    unpack_container,
)
from adscope.model import CallEdge, ClassSummary, Diagnostic, InvokeKind, MethodRef
from dexbuilder import DexBuilder, MethodSpec
from fixtures import random_builder


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("")
    assert len(load_manifest(p)) == 0


def test_duplicate_app_id():
    with pytest.raises(DuplicateAppId):
        parse_manifest("a1\tx.dex\t100\na1\ty.dex\t500\n")


def test_store_range_bucket():
    m = parse_manifest("a1\tapps/a1.apk\t5,000 – 10,000\tcategory=GAME\n")
    assert m.apps[0].install_bucket_lower == 5000
    assert m.apps[0].metadata == (("category", "GAME"),)


@pytest.mark.parametrize("text, expected", [
    ("5000", 5000), ("5,000", 5000), ("5,000 - 10,000", 5000), ("1,000,000+", 1000000),
    ("0 – 1", 0), ("unknown", None), ("?", None), ("100,000,000 – 500,000,000", 100000000),
])
def test_bucket_parsing(text, expected):
    assert parse_install_bucket(text) == expected


@pytest.mark.parametrize("text", ["7000", "abc", "5,000 to 10,000", "-5"])
def test_bad_bucket(text):
    with pytest.raises(ValueError):
        parse_install_bucket(text)


def test_manifest_errors_report_line_and_field():
    with pytest.raises(ManifestSyntax) as exc:
        parse_manifest("# header\na1\tx.dex\t5000\na2\ty.dex\t7000\n")
    assert exc.value.line == 3 and exc.value.field == "install_bucket"
    with pytest.raises(ManifestSyntax) as exc:
        parse_manifest("a1\tx.dex\n")
    assert exc.value.line == 1


def test_manifest_round_trip(tmp_path):
    text = ("# registry_version: top20-1\n# created: 2026-01-01T00:00:00+00:00\n"
            "a1\tapps/a1.apk\t5000\tcategory=GAME\n"
            "a2\tapps/a2.dex\tunknown\n")
    assert dump_manifest(parse_manifest(text)) == text
    m = parse_manifest("# a comment\n\n a1 \tapps/a1.apk\t5,000 – 10,000\n")
    once = dump_manifest(m)
    assert dump_manifest(parse_manifest(once)) == once
    assert once == "a1\tapps/a1.apk\t5000\n"


@settings(max_examples=50)
@given(st.lists(st.tuples(st.text("abcdefgh0123456789_.", min_size=1, max_size=8),
                          st.sampled_from([None, 0, 1, 5000, 10000, 100000000])), max_size=20))
def test_manifest_round_trip_property(rows):
    apps, seen = [], set()
    for app_id, bucket in rows:
        if app_id in seen:
            continue
        seen.add(app_id)
        apps.append(AppRecord(app_id, f"src/{app_id}.dex", bucket))
    text = "".join(f"{a.app_id}\t{a.source}\t{'unknown' if a.install_bucket_lower is None else a.install_bucket_lower}\n"
                   for a in apps)
    assert dump_manifest(parse_manifest(text)) == text
    assert parse_manifest(text).apps == apps


def test_call_log_empty():
    assert parse_call_log(io.StringIO(""), "a") == []


def test_call_log_single_record():
    line = "Lcom/example/Main; Lcom/google/ads/AdView; loadAd (Lcom/google/ads/AdRequest;)V"
    expected = CallEdge("a", "Lcom/example/Main;",
                        MethodRef("Lcom/google/ads/AdView;", "loadAd", ("Lcom/google/ads/AdRequest;",), "V"),
                        InvokeKind.VIRTUAL)
    assert parse_call_log(io.StringIO(line), "a") == [expected]
    assert parse_call_log(line.replace(" ", "\t") + "\tvirtual\n", "a") == [expected]


def test_call_log_two_columns():
    with pytest.raises(RecordSyntax) as exc:
        parse_call_log("# c\nLa/B;\tLc/D;\n", "a")
    assert exc.value.line == 2


@pytest.mark.parametrize("line", [
    "La/B; Lc/D; f (I",
    "La/B; Lc/D; f (Q)V",
    "La/B; notaclass f ()V",
    "La/B; Lc/D; f ()V bogus",
])
def test_call_log_bad_records(line):
    with pytest.raises(RecordSyntax):
        parse_call_log(line, "a")


def test_call_log_kind_column_variants():
    edges = parse_call_log("La/B;\tLc/D;\tf\t()V\tinvoke-static/range\n", "a")
    assert edges[0].invoke_kind is InvokeKind.STATIC


@pytest.mark.parametrize("seed", range(20))
def test_frontend_equivalence(seed):
    b = random_builder(random.Random(seed))
    from_dex = extract_call_edges(parse_dex(b.build()), "app")
    from_log = parse_call_log(format_call_log(b.expected_edges("app")), "app")
    assert Counter(from_dex) == Counter(from_log)


def _zip(entries):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in entries:
            zf.writestr(name, data)
    return buf.getvalue()


def _dex(tag):
    b = DexBuilder()
    b.add_class(f"Lcom/{tag}/A;", [MethodSpec("f")])
    return b.build()


def test_unpack_raw_dex(tmp_path):
    p = tmp_path / "classes.dex"
    p.write_bytes(_dex("one"))
    assert unpack_container(p) == [_dex("one")]


def test_unpack_multidex_order(tmp_path):
    p = tmp_path / "app.apk"
    p.write_bytes(_zip([("classes10.dex", _dex("ten")), ("AndroidManifest.xml", b"<x/>"),
                        ("classes2.dex", _dex("two")), ("classes.dex", _dex("one"))]))
    assert unpack_container(p) == [_dex("one"), _dex("two"), _dex("ten")]


def test_unpack_no_dex(tmp_path):
    p = tmp_path / "app.apk"
    p.write_bytes(_zip([("res/a.png", b"x")]))
    with pytest.raises(NoDexFound):
        unpack_container(p)


def test_unpack_corrupt(tmp_path):
    p = tmp_path / "app.apk"
    p.write_bytes(_zip([("classes.dex", _dex("one"))])[:60])
    with pytest.raises(ArchiveCorrupt):
        unpack_container(p)


def test_cache_round_trip(tmp_path):
    cache = ScanCache(tmp_path)
    ref = MethodRef("Lcom/google/ads/AdView;", "loadAd", ("Lcom/google/ads/AdRequest;",), "V")
    res = ScanResult("a1", "ab" * 32, [CallEdge("a1", "Lx/Y;", ref, InvokeKind.STATIC)],
                     [ClassSummary("Lx/Y;", ((0, "void"),), ("s",)), ClassSummary("Lz/Q;")],
                     [Diagnostic("k", "w", "m")])
    cache.put(res)
    assert cache.get(res.digest, "a1") == res
    # same content under another app id is rebound, not duplicated
    other = cache.get(res.digest, "b2")
    assert other.app_id == "b2" and other.edges[0].app_id == "b2"
    assert cache.get("cd" * 32, "a1") is None
    assert cache.read_index() is None
    cache.write_index({"a1": {"status": "ok", "digest": res.digest, "message": ""}})
    assert cache.read_index()["a1"]["status"] == "ok"
