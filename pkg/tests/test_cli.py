import hashlib
import json

import pytest

from amavc import cli
from amavc.cli import main, new_run_dir
from amavc.errors import NonFiniteLoss

from conftest import TINY

SMALL = {
    "seed": 3,
    "corpus": {**TINY, "frames_per_utterance": list(TINY["frames_per_utterance"])},
    "embedder": {"n_res_blocks": 3, "channels": 16, "embedding_dim": 16, "steps": 30},
    "measurement_embedder": {"n_res_blocks": 3, "channels": 16, "embedding_dim": 16, "steps": 30},
    "model": {"hidden": 16, "n_recurrent_layers": 1},
    "average": {"steps": 20, "batch_size": 4},
    "adaptation": {"steps": 5, "batch_size": 4},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def only_run(out_dir, before=()):
    new = sorted(set(out_dir.iterdir()) - set(before))
    assert len(new) == 1, new
    return new[0]


def test_eval_with_missing_checkpoint_names_the_field(capsys, tmp_path, config):
    manifest = tmp_path / "m.json"
    manifest.write_text("{}")
    code, _, err = run(
        capsys, "eval", "--config", config, "--manifest", manifest, "--checkpoint", tmp_path / "nope", "--out", tmp_path / "runs"
    )
    assert code == 2
    assert "checkpoint" in err
    assert "Traceback" not in err
    assert not (tmp_path / "runs").exists()


def test_missing_required_flag(capsys, tmp_path, config):
    code, _, err = run(capsys, "adapt", "--config", config, "--out", tmp_path)
    assert code == 2 and "manifest" in err


def test_bad_config_keys(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"corpus": {"n_speakers": 3, "sampling": 1}}))
    code, _, err = run(capsys, "synth-corpus", "--config", path, "--out", tmp_path)
    assert code == 2 and "sampling" in err
    path.write_text("{not json")
    assert run(capsys, "synth-corpus", "--config", path)[0] == 2


def test_log_level_validation(capsys, tmp_path, config, monkeypatch):
    monkeypatch.setenv("VCC_LOG_LEVEL", "loud")
    code, _, err = run(capsys, "synth-corpus", "--config", config, "--out", tmp_path, "--dry-run")
    assert code == 2 and "VCC_LOG_LEVEL" in err
    monkeypatch.setenv("VCC_LOG_LEVEL", "debug")
    assert run(capsys, "synth-corpus", "--config", config, "--out", tmp_path, "--dry-run")[0] == 0


def test_dry_run_leaves_output_untouched(capsys, tmp_path, config):
    out = tmp_path / "runs"
    code, stdout, _ = run(capsys, "ablation", "--config", config, "--out", out, "--dry-run", "--system", "ama-se-rc")
    assert code == 0
    assert "AMA-SE-RC" in stdout and "AMA-R:" not in stdout
    assert not out.exists()


def test_run_dirs_are_never_reused(tmp_path):
    a, b = new_run_dir(tmp_path, "eval"), new_run_dir(tmp_path, "eval")
    assert a != b and a.is_dir() and b.is_dir()


def test_seed_flag_reaches_the_corpus(capsys, tmp_path, config):
    out = tmp_path / "runs"
    assert run(capsys, "synth-corpus", "--config", config, "--out", out, "--seed", 11)[0] == 0
    truth = json.loads((only_run(out) / "corpus" / "ground_truth.json").read_text())
    assert truth["config"]["seed"] == 11


def _hashes_match(run_dir):
    files = json.loads((run_dir / "files.json").read_text())
    assert "config.json" in files
    for rel, digest in files.items():
        assert hashlib.sha256((run_dir / rel).read_bytes()).hexdigest() == digest


def test_stage_by_stage_pipeline(capsys, tmp_path, config):
    out = tmp_path / "runs"
    base = ["--config", config, "--out", out]

    assert run(capsys, "synth-corpus", *base)[0] == 0
    corpus_run = only_run(out)
    manifest = corpus_run / "corpus" / "manifest.json"
    _hashes_match(corpus_run)

    seen = list(out.iterdir())
    assert run(capsys, "pretrain-embedder", *base, "--manifest", manifest)[0] == 0
    emb = only_run(out, seen) / "embedder.json"

    seen = list(out.iterdir())
    code, stdout, err = run(capsys, "train-average", *base, "--manifest", manifest, "--embedder", emb, "--system", "ama-se-rc")
    assert code == 0, err
    avg_run = only_run(out, seen)
    assert json.loads((avg_run / "freeze_check.json").read_text())["embedder_frozen"] is True
    assert len((avg_run / "train_log.jsonl").read_text().splitlines()) == 20
    _hashes_match(avg_run)

    seen = list(out.iterdir())
    code, _, err = run(
        capsys, "adapt", *base, "--manifest", manifest, "--embedder", emb, "--checkpoint", avg_run / "ama-se-rc_average", "--target", "spk03"
    )
    assert code == 0, err
    adapt_run = only_run(out, seen)
    assert json.loads((adapt_run / "freeze_check.json").read_text())["embedder_frozen"] is True
    profile = json.loads((adapt_run / "spk03_profile.json").read_text())
    assert len(profile["embedding"]) == 16
    adapted = adapt_run / "ama-se-rc_spk03"

    seen = list(out.iterdir())
    code, _, err = run(
        capsys,
        "convert",
        *base,
        "--manifest",
        manifest,
        "--embedder",
        emb,
        "--checkpoint",
        adapted,
        "--source",
        "spk00",
        "--target-profile",
        adapt_run / "spk03_profile.json",
    )
    assert code == 0, err
    converted = sorted((only_run(out, seen) / "converted").iterdir())
    assert len(converted) == 2 * 12

    seen = list(out.iterdir())
    code, stdout, err = run(capsys, "eval", *base, "--manifest", manifest, "--embedder", emb, "--checkpoint", adapted)
    assert code == 0, err
    eval_run = only_run(out, seen)
    report = json.loads((eval_run / "report.json").read_text())
    assert report["system"] == "AMA-SE-RC" and report["n_utterances"] == 3
    assert "AMA-SE-RC" in stdout
    _hashes_match(eval_run)

    # adapting an adapted model is rejected as invalid input, not a crash
    code, _, err = run(capsys, "adapt", *base, "--manifest", manifest, "--embedder", emb, "--checkpoint", adapted, "--target", "spk03")
    assert code == 2 and "WrongStage" in err


def test_ablation_twice_gives_identical_reports(capsys, tmp_path, config):
    out = tmp_path / "runs"
    assert run(capsys, "ablation", "--config", config, "--out", out, "--seed", 7)[0] == 0
    first = only_run(out)
    assert run(capsys, "ablation", "--config", config, "--out", out, "--seed", 7)[0] == 0
    second = only_run(out, [first])
    names = ["ablation_report.json", "ablation_report.txt"] + [f"reports/{p.name}" for p in (first / "reports").iterdir()]
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    _hashes_match(first)


def test_runtime_failure_exits_one(capsys, tmp_path, config, monkeypatch):
    def boom(cfg, run_dir):
        raise NonFiniteLoss("loss became non-finite at step 3", ["spk00_0001", "spk01_0004"])

    monkeypatch.setitem(cli.HANDLERS, "synth-corpus", boom)
    code, _, err = run(capsys, "synth-corpus", "--config", config, "--out", tmp_path)
    assert code == 1
    assert "spk00_0001" in err and "Traceback" not in err
