import json
import shutil
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amavc.errors import (
    BadMagic,
    DimMismatch,
    FrameCountMismatch,
    InvariantViolation,
    MissingFile,
    NonFiniteValue,
    ParseError,
    TruncatedPayload,
    UnknownSpeaker,
)
from amavc.features import (
    UNVOICED,
    FeatureDims,
    FeatureKind,
    FeatureSequence,
    decode_feature,
    encode_feature,
    load_manifest,
    read_feature_file,
    write_feature_file,
)


def random_sequence(rng, kind, t, d):
    if kind == FeatureKind.PPG:
        frames = rng.dirichlet(np.ones(d), size=t)
    elif kind == FeatureKind.MCC:
        frames = rng.normal(size=(t, d)) * 3
    else:
        frames = np.where(rng.random((t, 1)) < 0.3, UNVOICED, rng.normal(5.0, 0.3, size=(t, 1)))
    return FeatureSequence(kind, frames, utterance_id="u")


def test_mcc_round_trip_and_rewrite_bytes(tmp_path, rng):
    seq = random_sequence(rng, FeatureKind.MCC, 3, 40)
    write_feature_file(seq, tmp_path / "a.vcf")
    back = read_feature_file(tmp_path / "a.vcf")
    assert back == seq
    np.testing.assert_array_equal(back.frames, seq.frames)
    write_feature_file(back, tmp_path / "b.vcf")
    assert (tmp_path / "a.vcf").read_bytes() == (tmp_path / "b.vcf").read_bytes()


def test_layout_is_header_plus_float32_payload(tmp_path):
    seq = FeatureSequence(FeatureKind.LF0, np.array([[5.0]]))
    write_feature_file(seq, tmp_path / "f.vcf")
    raw = (tmp_path / "f.vcf").read_bytes()
    # 4 magic + three u32 fields + one f32 value
    assert len(raw) == 20
    assert raw[:4] == b"VCF1"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 2)
    assert struct.unpack("<f", raw[16:]) == (5.0,)


def test_bad_magic():
    data = b"XXXX" + bytes(12)
    with pytest.raises(BadMagic):
        decode_feature(data)


@pytest.mark.parametrize("cut", [2, 10, 17])
def test_truncation(rng, cut):
    data = encode_feature(random_sequence(rng, FeatureKind.MCC, 2, 3))
    with pytest.raises((TruncatedPayload, BadMagic)):
        decode_feature(data[:cut])


def test_non_finite_payload_rejected(rng):
    data = bytearray(encode_feature(random_sequence(rng, FeatureKind.MCC, 2, 3)))
    data[16:20] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteValue):
        decode_feature(bytes(data))


def test_strict_dims(tmp_path, rng):
    write_feature_file(random_sequence(rng, FeatureKind.MCC, 4, 20), tmp_path / "m.vcf")
    with pytest.raises(DimMismatch):
        read_feature_file(tmp_path / "m.vcf")
    assert read_feature_file(tmp_path / "m.vcf", dims=None).dim == 20
    assert read_feature_file(tmp_path / "m.vcf", dims=FeatureDims(16, 20)).dim == 20


def test_invariants():
    with pytest.raises(InvariantViolation):
        FeatureSequence(FeatureKind.MCC, np.zeros((0, 40)))
    with pytest.raises(InvariantViolation):
        FeatureSequence(FeatureKind.PPG, np.full((2, 4), 0.3))
    with pytest.raises(InvariantViolation):
        FeatureSequence(FeatureKind.PPG, np.array([[1.5, -0.5]]))
    with pytest.raises(DimMismatch):
        FeatureSequence(FeatureKind.LF0, np.zeros((3, 2)))
    with pytest.raises(NonFiniteValue):
        FeatureSequence(FeatureKind.MCC, np.array([[np.inf]]))


def test_unvoiced_sentinel_survives(tmp_path):
    seq = FeatureSequence(FeatureKind.LF0, np.array([5.0, UNVOICED, 4.8]))
    write_feature_file(seq, tmp_path / "f.vcf")
    back = read_feature_file(tmp_path / "f.vcf")
    assert back.voiced_mask().tolist() == [True, False, True]


@settings(max_examples=100, deadline=None)
@given(
    kind=st.sampled_from(list(FeatureKind)),
    t=st.integers(1, 60),
    d=st.integers(1, 48),
    seed=st.integers(0, 2**32 - 1),
)
def test_fuzz_round_trip(kind, t, d, seed):
    rng = np.random.default_rng(seed)
    if kind == FeatureKind.LF0:
        d = 1
    if kind == FeatureKind.PPG:
        d = max(d, 2)
    seq = random_sequence(rng, kind, t, d)
    back = decode_feature(encode_feature(seq))
    assert back.kind == seq.kind
    assert np.max(np.abs(back.frames - seq.frames), initial=0.0) == 0.0
    assert back.frames.tobytes() == seq.frames.tobytes()


# manifests


def _copy_corpus(manifest, dest):
    shutil.copytree(manifest.root, dest)
    doc = json.loads((dest / "manifest.json").read_text())
    return doc


def _write(doc, dest):
    (dest / "manifest.json").write_text(json.dumps(doc))
    return dest / "manifest.json"


def test_generated_manifest_loads(tiny_corpus):
    assert len(tiny_corpus.utterances) == 48
    assert {u.split for u in tiny_corpus.utterances} == {"train", "adapt", "eval"}


def test_manifest_frame_count_mismatch(tiny_corpus, tmp_path):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    doc["utterances"][0]["frames"] += 1
    with pytest.raises(FrameCountMismatch):
        load_manifest(_write(doc, tmp_path / "c"))


def test_manifest_truncated_file_count_mismatch(tiny_corpus, tmp_path):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    entry = doc["utterances"][0]
    path = tmp_path / "c" / entry["mcc"]
    seq = read_feature_file(path, dims=None)
    write_feature_file(FeatureSequence(seq.kind, seq.frames[:-1]), path)
    with pytest.raises(FrameCountMismatch):
        load_manifest(tmp_path / "c" / "manifest.json")


def test_manifest_duplicate_id_names_it(tiny_corpus, tmp_path):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    doc["utterances"][1]["id"] = doc["utterances"][0]["id"]
    with pytest.raises(ParseError, match=doc["utterances"][0]["id"]):
        load_manifest(_write(doc, tmp_path / "c"))


def test_manifest_missing_file(tiny_corpus, tmp_path):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    (tmp_path / "c" / doc["utterances"][2]["lf0"]).unlink()
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "c" / "manifest.json")


def test_manifest_unknown_speaker(tiny_corpus, tmp_path):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    doc["utterances"][0]["speaker"] = "nobody"
    with pytest.raises(UnknownSpeaker):
        load_manifest(_write(doc, tmp_path / "c"))


def test_manifest_wrong_kind_in_slot(tiny_corpus, tmp_path):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    doc["utterances"][0]["mcc"] = doc["utterances"][0]["lf0"]
    with pytest.raises(ParseError):
        load_manifest(_write(doc, tmp_path / "c"))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("speakers"),
        lambda d: d["utterances"][0].pop("split"),
        lambda d: d["utterances"][0].update(split="test"),
        lambda d: d.update(utterances=[1]),
    ],
)
def test_manifest_parse_errors(tiny_corpus, tmp_path, mutate):
    doc = _copy_corpus(tiny_corpus, tmp_path / "c")
    mutate(doc)
    with pytest.raises(ParseError):
        load_manifest(_write(doc, tmp_path / "c"))


def test_manifest_load_does_not_touch_files(tiny_corpus):
    before = {p: p.stat().st_mtime_ns for p in tiny_corpus.root.rglob("*") if p.is_file()}
    load_manifest(tiny_corpus.root / "manifest.json")
    after = {p: p.stat().st_mtime_ns for p in tiny_corpus.root.rglob("*") if p.is_file()}
    assert before == after


def test_subset_and_splits(tiny_corpus):
    target = tiny_corpus.speakers_in("adapt")
    assert target == ["spk03"]
    sub = tiny_corpus.subset(target, ["eval"])
    assert sub.speakers == target
    assert all(u.split == "eval" for u in sub.utterances)
