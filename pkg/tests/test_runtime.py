import dataclasses
import warnings

import numpy as np
import pytest

import oracles
from amavc.embedder import SpeakerEmbedding, embed
from amavc.errors import DimMismatch, InsufficientVoicedFrames, InvalidConfig, MissingEmbedder, MissingEmbedding, StageWarning
from amavc.features import UNVOICED, FeatureKind, FeatureSequence
from amavc.model import ConversionConfig, init_model
from amavc.runtime import (
    SpeakerProfile,
    build_profile,
    convert_f0,
    convert_f0_values,
    convert_utterance,
    voiced_values,
)


@dataclasses.dataclass
class Rec:
    """In-memory stand-in for a manifest record."""

    speaker_id: str
    lf0: np.ndarray
    mcc: np.ndarray | None = None

    def load(self, kind):
        if kind == FeatureKind.LF0:
            return FeatureSequence(kind, self.lf0)
        return FeatureSequence(kind, self.mcc)


SRC = SpeakerProfile("a", 4.8, 0.25, 1000)
TGT = SpeakerProfile("b", 5.3, 0.15, 1000)


def test_mean_and_unit_z_map():
    assert convert_f0_values(SRC.lf0_mean, SRC, TGT) == pytest.approx(TGT.lf0_mean, abs=1e-12)
    assert convert_f0_values(SRC.lf0_mean + SRC.lf0_std, SRC, TGT) == pytest.approx(
        TGT.lf0_mean + TGT.lf0_std, abs=1e-12
    )


def test_round_trip_is_exact_in_float64(rng):
    x = rng.normal(4.8, 0.25, 1000)
    back = convert_f0_values(convert_f0_values(x, SRC, TGT), TGT, SRC)
    assert np.max(np.abs(back - x)) < 1e-9


def test_unvoiced_frames_bit_identical_and_length_kept(rng):
    x = rng.normal(4.8, 0.25, 300)
    x[rng.random(300) < 0.4] = UNVOICED
    seq = FeatureSequence(FeatureKind.LF0, x)
    out = convert_f0(seq, SRC, TGT)
    assert out.n_frames == 300
    unvoiced = ~seq.voiced_mask()
    assert out.frames[unvoiced].tobytes() == seq.frames[unvoiced].tobytes()
    np.testing.assert_allclose(
        out.frames[~unvoiced, 0], convert_f0_values(seq.frames[~unvoiced, 0], SRC, TGT), rtol=0, atol=1e-5
    )


def test_converted_distribution_matches_target(rng):
    x = rng.normal(SRC.lf0_mean, SRC.lf0_std, 10_000)
    y = convert_f0_values(x, SRC, TGT)
    mu, sd = oracles.mean_std(list(y))
    n = len(y)
    # the input is a sample, so its own deviations carry over scaled by the std ratio
    assert abs(mu - TGT.lf0_mean) < 3 * TGT.lf0_std / np.sqrt(n)
    assert abs(sd - TGT.lf0_std) < 3 * TGT.lf0_std / np.sqrt(2 * n)


def test_profile_of_gaussian_speaker(rng):
    lf0 = rng.normal(5.0, 0.2, 5000)
    recs = [Rec("s", chunk) for chunk in np.array_split(lf0, 10)]
    prof = build_profile(recs)
    assert prof.speaker_id == "s"
    assert prof.n_stat_frames == 5000
    assert abs(prof.lf0_mean - 5.0) <= 0.01
    assert abs(prof.lf0_std - 0.2) <= 0.01
    mu, sd = oracles.mean_std(list(lf0.astype(np.float32).astype(np.float64)))
    assert prof.lf0_mean == pytest.approx(mu, rel=1e-9)
    assert prof.lf0_std == pytest.approx(sd, rel=1e-9)


def test_profile_ignores_unvoiced_frames(rng):
    lf0 = rng.normal(5.0, 0.2, 400)
    with_gaps = np.concatenate([lf0, np.full(400, UNVOICED)])
    assert build_profile([Rec("s", with_gaps)]).lf0_mean == build_profile([Rec("s", lf0)]).lf0_mean


def test_split_half_profiles_agree(tiny_corpus):
    recs = tiny_corpus.by_speaker()["spk00"]
    a, b = build_profile(recs[::2]), build_profile(recs[1::2])
    se_mean = np.hypot(a.lf0_std / np.sqrt(a.n_stat_frames), b.lf0_std / np.sqrt(b.n_stat_frames))
    se_std = np.hypot(a.lf0_std / np.sqrt(2 * a.n_stat_frames), b.lf0_std / np.sqrt(2 * b.n_stat_frames))
    assert abs(a.lf0_mean - b.lf0_mean) < 3 * se_mean
    assert abs(a.lf0_std - b.lf0_std) < 3 * se_std


def test_all_unvoiced_is_insufficient():
    with pytest.raises(InsufficientVoicedFrames):
        build_profile([Rec("s", np.full(500, UNVOICED))])
    with pytest.raises(InsufficientVoicedFrames):
        build_profile([Rec("s", np.full(29, 5.0))])


def test_profile_embedding(tiny_corpus, tiny_embedder):
    recs = tiny_corpus.by_speaker()["spk01"][:4]
    with pytest.raises(MissingEmbedder):
        build_profile(recs, with_embedding=True)
    prof = build_profile(recs, tiny_embedder, with_embedding=True)
    mean = np.mean([embed(r.load(FeatureKind.MCC), tiny_embedder).values for r in recs], axis=0)
    np.testing.assert_allclose(prof.reference_embedding.values, mean, rtol=1e-5, atol=1e-6)


def test_profile_json_round_trip(tmp_path):
    prof = SpeakerProfile("b", 5.1, 0.2, 120, SpeakerEmbedding(np.arange(4.0)))
    prof.save(tmp_path / "p.json")
    back = SpeakerProfile.load(tmp_path / "p.json")
    assert back.lf0_mean == prof.lf0_mean and back.n_stat_frames == 120
    np.testing.assert_array_equal(back.reference_embedding.values, prof.reference_embedding.values)
    with pytest.raises(InvalidConfig):
        SpeakerProfile("z", 5.0, 0.0, 100)


def _inputs(rng, t=200, p=8):
    ppg = FeatureSequence(FeatureKind.PPG, rng.dirichlet(np.ones(p), size=t), utterance_id="utt1")
    lf0 = rng.normal(4.8, 0.25, t)
    lf0[::7] = UNVOICED
    return ppg, FeatureSequence(FeatureKind.LF0, lf0, utterance_id="utt1")


def _adapted(se=False):
    cfg = ConversionConfig(input_dim=8, output_dim=6, hidden=8, n_recurrent_layers=1)
    if se:
        cfg = dataclasses.replace(cfg, use_speaker_embedding=True, embedding_dim=4)
    ckpt = init_model(cfg)
    ckpt.stage = "adapted"
    return ckpt


def test_convert_utterance_lengths_and_files(rng, tmp_path):
    ppg, lf0 = _inputs(rng)
    out = convert_utterance(ppg, lf0, SRC, TGT, _adapted(), out_dir=tmp_path / "a")
    assert out["mcc"].n_frames == 200 and out["lf0"].n_frames == 200
    convert_utterance(ppg, lf0, SRC, TGT, _adapted(), out_dir=tmp_path / "b")
    for name in ("utt1.mcc.vcf", "utt1.lf0.vcf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_average_checkpoint_warns(rng):
    ckpt = _adapted()
    ckpt.stage = "average"
    with pytest.warns(StageWarning):
        convert_utterance(*_inputs(rng, 20), SRC, TGT, ckpt)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        convert_utterance(*_inputs(rng, 20), SRC, TGT, _adapted())


def test_se_model_needs_target_embedding(rng):
    with pytest.raises(MissingEmbedding):
        convert_utterance(*_inputs(rng, 20), SRC, TGT, _adapted(se=True))
    tgt = dataclasses.replace(TGT, reference_embedding=SpeakerEmbedding(np.ones(4)))
    assert convert_utterance(*_inputs(rng, 20), SRC, tgt, _adapted(se=True))["mcc"].dim == 6


def test_frame_count_mismatch(rng):
    ppg, _ = _inputs(rng, 20)
    _, lf0 = _inputs(rng, 21)
    with pytest.raises(DimMismatch):
        convert_utterance(ppg, lf0, SRC, TGT, _adapted())


def test_voiced_values(rng):
    seq = FeatureSequence(FeatureKind.LF0, np.array([5.0, UNVOICED, 4.5]))
    np.testing.assert_array_equal(voiced_values(seq), [5.0, 4.5])
