import json
import os

import numpy as np
import pytest

from lda import ingest, sourcegen, store, worldsim as ws
from lda.errors import ConfigError, CorruptionError, MigrationError


@pytest.fixture(scope="module")
def episodes(tmp_path_factory):
    src = tmp_path_factory.mktemp("src")
    out = []
    for seed in range(10):
        q = (
            ws.ControllerQuality.EXPERT
            if seed < 5
            else ws.ControllerQuality.NOISY
            if seed < 8
            else ws.ControllerQuality.RANDOM
        )
        ep = ws.generate_episode(seed=seed, quality=q, native_rate_hz=30, max_steps=60)
        actionless = q is ws.ControllerQuality.RANDOM
        path = sourcegen.write_format_a(ep, str(src), f"e{seed}", actionless=actionless)
        out.append(ingest.ingest_file(path, "a", episode_id=f"e{seed:03d}"))
    return out


def ep_equal(a: store.UnifiedEpisode, b: store.UnifiedEpisode) -> bool:
    if a.episode_id != b.episode_id or a.quality != b.quality:
        return False
    if a.instruction_text != b.instruction_text or a.provenance != b.provenance:
        return False
    if not np.array_equal(a.frames, b.frames):
        return False
    for x, y in ((a.wrist_pose, b.wrist_pose), (a.grip, b.grip), (a.actions, b.actions)):
        if (x is None) != (y is None):
            return False
        if x is not None and not np.array_equal(x, y):
            return False
    return True


def test_write_then_read_identity(tmp_path, episodes):
    store.write_store(episodes, str(tmp_path / "s"))
    back = list(store.read_store(str(tmp_path / "s")))
    assert len(back) == len(episodes)
    for a, b in zip(episodes, back):
        assert ep_equal(a, b)


def test_read_empty_dir_is_manifest_missing(tmp_path):
    with pytest.raises(ConfigError):
        list(store.read_store(str(tmp_path)))


def test_manifest_stats_match_index(tmp_path, episodes):
    manifest = store.write_store(episodes, str(tmp_path / "s"))
    tally = {"high": 0, "low": 0, "actionless": 0}
    for e in manifest.episodes:
        tally[e["quality"]] += 1
    assert manifest.stats["count_high"] == tally["high"]
    assert manifest.stats["count_low"] == tally["low"]
    assert manifest.stats["count_actionless"] == tally["actionless"]
    assert manifest.stats["total_duration_s"] == pytest.approx(
        sum(e["duration_s"] for e in manifest.episodes)
    )


def test_actionless_absence_is_loud(tmp_path, episodes):
    store.write_store(episodes, str(tmp_path / "s"))
    back = {ep.episode_id: ep for ep in store.read_store(str(tmp_path / "s"))}
    actionless = [ep for ep in back.values() if ep.quality == "actionless"]
    assert actionless, "fixture should include actionless episodes"
    for ep in actionless:
        assert ep.actions is None and ep.wrist_pose is None and ep.grip is None
        with pytest.raises(store.ActionsAbsentError):
            ep.require_actions()
    epdir = os.path.join(str(tmp_path / "s"), f"ep_{actionless[0].episode_id}")
    with open(os.path.join(epdir, "arrays.json")) as fh:
        descriptor = json.load(fh)
    assert "actions" not in descriptor["arrays"]  # physically absent, not zeros


def test_corruption_detected_and_named(tmp_path, episodes):
    sdir = str(tmp_path / "s")
    store.write_store(episodes[:3], sdir)
    victim = os.path.join(sdir, "ep_e001", "arrays.bin")
    blob = bytearray(open(victim, "rb").read())
    blob[4] ^= 0xFF
    open(victim, "wb").write(bytes(blob))
    with pytest.raises(CorruptionError) as ei:
        list(store.read_store(sdir))
    assert "e001" in str(ei.value)


def test_version_mismatch(tmp_path, episodes):
    sdir = str(tmp_path / "s")
    store.write_store(episodes[:2], sdir)
    path = os.path.join(sdir, "manifest.json")
    obj = json.load(open(path))
    obj["version"] = 99
    json.dump(obj, open(path, "w"))
    with pytest.raises(MigrationError):
        list(store.read_store(sdir))


def test_split_is_stable_and_roughly_90_10():
    ids = [f"ep{i:05d}" for i in range(2000)]
    splits = [store.split_of(i) for i in ids]
    assert splits == [store.split_of(i) for i in ids]
    frac = splits.count("heldout") / len(splits)
    assert 0.06 <= frac <= 0.14


def test_store_reader_random_access(tmp_path, episodes):
    sdir = str(tmp_path / "s")
    store.write_store(episodes, sdir)
    reader = store.StoreReader(sdir)
    assert set(reader.ids()) == {ep.episode_id for ep in episodes}
    some = reader.ids(qualities=("high",))
    assert some
    ep = reader.episode(some[0])
    assert ep.quality == "high"
    assert reader.episode(some[0]) is ep  # cached


def test_timestamps_exact_multiples(tmp_path, episodes):
    store.write_store(episodes[:2], str(tmp_path / "s"))
    for ep in store.read_store(str(tmp_path / "s")):
        assert np.array_equal(ep.timestamps, np.arange(ep.n_frames) / 10.0)
