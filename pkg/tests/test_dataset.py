import json
from decimal import Decimal

import pytest

from conftest import build_small
from instructedit.dataset import (
    BuildConfig,
    DatasetManifest,
    RawPair,
    balance_sample,
    build_dataset,
    cost_report,
    ingest_source,
    load_manifest,
    load_records,
    make_synth_sources,
    round_half_up,
    scale_quotas,
    write_source,
)
from instructedit.exceptions import (
    BuildFailureError,
    ConfigError,
    FormatVersionError,
    QuotaExceedsAvailableError,
    UnreadableSourceError,
)
from instructedit.forge import FixtureVlmClient, pair_digest
from instructedit.synth import synth_world


def test_quota_scaling():
    assert scale_quotas(40000) == {"ip2p": 10177, "magicbrush": 8807, "seed": 21016}
    assert scale_quotas(400) == {"ip2p": 102, "magicbrush": 88, "seed": 210}
    assert sum(scale_quotas(400).values()) == 400
    assert round_half_up(2.5) == 3 and round_half_up(101.77) == 102


def test_cost_report_examples():
    def manifest(n):
        return DatasetManifest({"a": n}, {"a": n}, n, {"x": n}, "h", 0.0, {"a": n}, 0.02)
    assert cost_report(manifest(40000)).total_usd == Decimal("800.00")
    assert cost_report(manifest(400)).total_usd == Decimal("8.00")
    assert cost_report(manifest(0)).total_usd == Decimal("0.00")
    assert "800.00" in str(cost_report(manifest(40000)))


def test_manifest_check():
    good = DatasetManifest({"a": 2}, {"a": 2}, 2, {"x": 2}, "h", 0.0)
    assert good.check() == []
    bad = DatasetManifest({"a": 1}, {"a": 2}, 3, {"x": 1}, "h", 0.0)
    assert len(bad.check()) == 3


def test_ingest(tmp_path):
    pairs = synth_world(5, seed=0)
    src = write_source(pairs, tmp_path / "s", "s")
    got, skipped = ingest_source(src)
    assert len(got) == 5 and skipped == 0
    assert [p.id for p in got] == [p.id for p in ingest_source(src)[0]]
    (src / "images" / "00002_edited.png").write_bytes(b"not a png")
    got, skipped = ingest_source(src)
    assert len(got) == 4 and skipped == 1


def test_ingest_errors(tmp_path):
    with pytest.raises(UnreadableSourceError):
        ingest_source(tmp_path / "missing")
    src = write_source(synth_world(1), tmp_path / "s", "s")
    (src / "source.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(FormatVersionError):
        ingest_source(src)


def fake(n, label=None, prefix="p"):
    return [RawPair(f"{prefix}{i:03d}", "s", b"", b"", "x",
                    label(i) if label else None) for i in range(n)]


def test_balance_exact_quotas_and_zero():
    srcs = [fake(10), fake(5, prefix="q"), fake(3, prefix="r")]
    picked = balance_sample(srcs, [4, 5, 0], seed=1)
    assert [len(p) for p in picked] == [4, 5, 0]
    assert picked == balance_sample(srcs, [4, 5, 0], seed=1)
    with pytest.raises(QuotaExceedsAvailableError):
        balance_sample(srcs, [11, 0, 0])
    with pytest.raises(ConfigError):
        balance_sample(srcs, [1, 1])


def test_balance_stratifies_labels():
    labels = ["a"] * 20 + ["b"] * 20 + ["c"] * 2
    src = fake(42, label=lambda i: labels[i])
    (ids,) = balance_sample([src], [12], seed=0)
    by = {p.id: p.task_type for p in src}
    counts = {k: sum(by[i] == k for i in ids) for k in "abc"}
    assert counts == {"a": 5, "b": 5, "c": 2}


def test_build_config_validation():
    with pytest.raises(ConfigError):
        BuildConfig(preset="huge")
    with pytest.raises(ConfigError):
        BuildConfig(quotas="1,2").quota_map()
    assert BuildConfig().quota_map() == {"ip2p": 102, "magicbrush": 88, "seed": 210}
    assert BuildConfig(seed=1).config_hash() != BuildConfig().config_hash()


def test_small_build_records(small_dataset):
    data_dir, manifest = small_dataset
    records = load_records(data_dir)
    assert manifest.total == len(records) == 24
    assert manifest.achieved == manifest.quotas == {"ip2p": 8, "magicbrush": 6, "seed": 10}
    assert manifest.check() == []
    assert [r.id for r in records] == sorted(r.id for r in records)
    for r in records:
        assert r.problems() == [] and r.training_ready
        assert (data_dir / r.original_path).exists()
        if r.verified:
            assert r.source_id == "magicbrush"
            assert r.rectified_instruction == r.raw_instruction and r.cost_usd == 0.0
        else:
            assert r.cost_usd == 0.02
    assert manifest.rectified_counts == {"ip2p": 8, "magicbrush": 0, "seed": 10}
    assert cost_report(manifest).total_usd == Decimal("0.36")
    assert load_manifest(data_dir) == manifest


def test_rectification_fixes_noisy_raw(small_dataset):
    records = load_records(small_dataset[0])
    noisy = [r for r in records if not r.verified and r.raw_instruction != r.rectified_instruction]
    assert noisy, "synthetic noise should produce some mismatched raw instructions"


def test_rebuild_with_warm_cache_is_byte_identical(tmp_path):
    data_dir, _, client, cfg, dirs = build_small(tmp_path, quotas="4,3,5")
    first = (data_dir / "records.jsonl").read_bytes()
    first_manifest = (data_dir / "manifest.json").read_bytes()
    calls = client.calls
    assert calls > 0
    build_dataset(cfg, data_dir, client, source_dirs=dirs)
    assert client.calls == calls
    assert (data_dir / "records.jsonl").read_bytes() == first
    assert (data_dir / "manifest.json").read_bytes() == first_manifest


def test_failure_ceiling(tmp_path):
    cfg = BuildConfig(quotas="4,3,5", workers=2)
    dirs, fixtures = make_synth_sources(cfg, tmp_path / "work")
    client = FixtureVlmClient(fixtures)
    # every ip2p sample loses its negatives: 4 of 12 fail
    for pair in ingest_source(dirs[0])[0]:
        client.add(pair_digest([pair.original, pair.edited]), "contrastive-instructions",
                   [{"sections": {"negatives": []}}])
    with pytest.raises(BuildFailureError):
        build_dataset(cfg, tmp_path / "out", client, source_dirs=dirs)
    lenient = BuildConfig(quotas="4,3,5", workers=2, failure_ceiling=0.5)
    manifest = build_dataset(lenient, tmp_path / "out2", client, source_dirs=dirs)
    assert manifest.total == 8 and manifest.failures == 4 and manifest.achieved["ip2p"] == 0
