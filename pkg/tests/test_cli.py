import io
import json
import zipfile
from pathlib import Path

import pytest

from adscope import pipeline
from adscope.cli import main
from adscope.ingest import ScanCache, load_manifest
from adscope.libid import LibraryFingerprint
from adscope.model import InvokeKind, MethodRef
from dexbuilder import ConstString, DexBuilder, Invoke, MethodSpec
from synth import make_corpus

SET_GENDER = MethodRef("Lcom/google/ads/AdRequest;", "setGender", ("Lcom/google/ads/AdRequest$Gender;",),
                       "Lcom/google/ads/AdRequest;")


def _common(root: Path, manifest: Path, *extra: str) -> list[str]:
    return ["--manifest", str(manifest), "--cache-dir", str(root / "cache"), "--out-dir", str(root / "out"), *extra]


def _apk(path: Path, calls) -> None:
    b = DexBuilder()
    b.add_class("Lcom/example/Main;", [MethodSpec("onCreate", code=[Invoke(InvokeKind.VIRTUAL, m) for m in calls])])
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("classes.dex", b.build())
    path.write_bytes(buf.getvalue())


def _tree(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_scan_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    assert main(["scan", *_common(tmp_path, tmp_path / "m.tsv")]) == 0
    assert ScanCache(tmp_path / "cache").read_index() == {}


def test_report_on_empty_corpus(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    assert main(["scan", *_common(tmp_path, tmp_path / "m.tsv")]) == 0
    assert main(["report", *_common(tmp_path, tmp_path / "m.tsv")]) == 0
    out = tmp_path / "out"
    names = set(_tree(out))
    for name in ("market_share", "category_usage", "per_library", "bucket_profile", "corpus_summary",
                 "api_size", "correlation", "working_api"):
        assert f"{name}.csv" in names
    assert (out / "market_share.csv").read_text() == "library,app_count,pct_of_corpus,pct_display\n"
    assert json.loads((out / "bucket_profile_plot.json").read_text()) == {}
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["run"]["apps_analyzed"] == 0


def test_unreadable_app_is_skipped(tmp_path, caplog):
    (tmp_path / "apps").mkdir()
    _apk(tmp_path / "apps" / "good.apk", [SET_GENDER])
    (tmp_path / "m.tsv").write_text("good\tapps/good.apk\t5000\nbad\tapps/missing.apk\t100\n")
    assert main(["scan", *_common(tmp_path, tmp_path / "m.tsv")]) == 0
    index = ScanCache(tmp_path / "cache").read_index()
    assert index["good"]["status"] == "ok" and index["bad"]["status"] == "skipped"
    assert main(["report", *_common(tmp_path, tmp_path / "m.tsv", "--format", "json")]) == 0
    usage = json.loads((tmp_path / "out" / "category_usage.json").read_text())
    gender = next(r for r in usage["rows"] if r["category"] == "Gender")
    assert gender["apps_making_call"] == 1 and gender["pct_of_apps"] == 1.0
    meta = json.loads((tmp_path / "out" / "metadata.json").read_text())
    assert meta["run"]["apps_skipped"] == 1


def test_hard_failure_exit_code(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"\xff\xfe\x00garbage")
    (tmp_path / "m.tsv").write_text("x\tjunk.bin\t100\n")
    assert main(["scan", *_common(tmp_path, tmp_path / "m.tsv")]) == 1
    assert ScanCache(tmp_path / "cache").read_index()["x"]["status"] == "failed"


def test_cache_matches_in_memory_run(tmp_path):
    corpus = make_corpus(21, n_apps=50)
    paths = corpus.write(tmp_path)
    args = _common(tmp_path, paths["manifest"], "--registry", str(paths["registry"]))
    assert main(["scan", *args]) == 0
    manifest = load_manifest(paths["manifest"])
    cached, _ = pipeline.load_scans(manifest, ScanCache(tmp_path / "cache"))
    assert cached == pipeline.scan_in_memory(manifest)
    # second scan is served entirely from cache
    outcomes = pipeline.scan_corpus(manifest, ScanCache(tmp_path / "cache"))
    assert all(o.cached for o in outcomes)


def test_report_is_deterministic_and_has_correlation(tmp_path):
    corpus = make_corpus(22, n_apps=40)
    paths = corpus.write(tmp_path)
    args = _common(tmp_path, paths["manifest"], "--registry", str(paths["registry"]),
                   "--rules", str(paths["rules"]), "--no-default-rules")
    assert main(["scan", *args]) == 0
    assert main(["report", *args]) == 0
    first = _tree(tmp_path / "out")
    assert main(["report", *args]) == 0
    assert _tree(tmp_path / "out") == first
    meta = json.loads(first["metadata.json"])
    assert meta["reports"]["correlation"]["r_display"] == "0.14"


def test_report_without_scan(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    assert main(["report", *_common(tmp_path, tmp_path / "m.tsv")]) == 1


def test_report_missing_permissions_file(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    main(["scan", *_common(tmp_path, tmp_path / "m.tsv")])
    assert main(["report", *_common(tmp_path, tmp_path / "m.tsv"), "--permissions", str(tmp_path / "p.tsv")]) == 1
    assert main(["report", *_common(tmp_path, tmp_path / "m.tsv"), "--no-correlation"]) == 0


@pytest.mark.parametrize("argv", [
    ["scan"],
    ["scan", "--manifest", "does-not-exist.tsv"],
    ["scan", "--manifest", "{m}", "--threshold", "0"],
    ["scan", "--manifest", "{m}", "--top", "0"],
    ["scan", "--manifest", "{m}", "--workers", "0"],
    ["scan", "--manifest", "{m}", "--registry", "nope.tsv"],
])
def test_config_errors_exit_2(tmp_path, argv):
    (tmp_path / "m.tsv").write_text("")
    argv = [a.replace("{m}", str(tmp_path / "m.tsv")) for a in argv]
    assert main(argv + ["--cache-dir", str(tmp_path / "c")]) == 2


def test_bad_manifest_is_config_error(tmp_path):
    (tmp_path / "m.tsv").write_text("a\tx.dex\tlots\n")
    assert main(["scan", *_common(tmp_path, tmp_path / "m.tsv")]) == 2


def test_cache_dir_from_environment(tmp_path, monkeypatch):
    (tmp_path / "m.tsv").write_text("")
    monkeypatch.setenv("ADSCOPE_CACHE_DIR", str(tmp_path / "envcache"))
    assert main(["scan", "--manifest", str(tmp_path / "m.tsv")]) == 0
    assert (tmp_path / "envcache" / "scan-index.json").exists()


def _suggest_setup(tmp_path, calls):
    (tmp_path / "apps").mkdir()
    _apk(tmp_path / "apps" / "a.apk", calls)
    (tmp_path / "m.tsv").write_text("a\tapps/a.apk\t5000\n")
    args = _common(tmp_path, tmp_path / "m.tsv")
    assert main(["scan", *args]) == 0
    return args


def test_suggest_rules(tmp_path, capsys):
    mobclix = "Lcom/mobclix/android/sdk/MobclixFullScreenAdView;"
    args = _suggest_setup(tmp_path, [SET_GENDER, MethodRef(mobclix, "setAge", ("I",), "V"),
                                     MethodRef(mobclix, "setGender", ("Ljava/lang/String;",), "V"),
                                     MethodRef(mobclix, "requestAd", (), "V")])
    capsys.readouterr()
    assert main(["suggest-rules", *args, "MobClix"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln and not ln.startswith("#")]
    assert sorted(ln.split("\t")[1] for ln in lines) == ["setAge", "setGender"]
    assert all("\theuristic\t" in ln for ln in lines)
    # AdMob's only method is already covered by a shipped rule
    assert main(["suggest-rules", *args, "AdMob"]) == 0
    assert capsys.readouterr().out == ""
    assert main(["suggest-rules", *args, "NoSuchLib"]) == 2


def test_fingerprint_command(tmp_path):
    b = DexBuilder()
    b.add_class("Lcom/airpush/android/PushAds;", [MethodSpec("go", ("I",), "V", [ConstString("airpush")])])
    b.add_class("Lcom/example/Main;", [MethodSpec("x")])
    (tmp_path / "ref.dex").write_bytes(b.build())
    out = tmp_path / "fp.json"
    assert main(["fingerprint", str(tmp_path / "ref.dex"), "com.airpush", "-o", str(out)]) == 0
    fp = LibraryFingerprint.load(out)
    assert fp.class_signatures == {((1, "void"),)} and fp.anchor_strings == {"airpush"}
    assert main(["fingerprint", str(tmp_path / "ref.dex"), "com.nothing", "-o", str(out)]) == 1


def test_validate_command(tmp_path, capsys):
    (tmp_path / "m.tsv").write_text("a\tmissing.apk\t100\n")
    (tmp_path / "r.tsv").write_text("Ghost\tsetX\t-\tGender\n")
    assert main(["validate", "--manifest", str(tmp_path / "m.tsv"), "--rules", str(tmp_path / "r.tsv")]) == 0
    out = capsys.readouterr().out
    assert "1 apps, 1 unresolvable" in out and "registry: 20 libraries" in out and "'Ghost'" in out
    (tmp_path / "bad.tsv").write_text("AdMob\tsetX\n")
    assert main(["validate", "--rules", str(tmp_path / "bad.tsv")]) == 2
