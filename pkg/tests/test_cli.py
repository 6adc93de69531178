import json

import numpy as np
import pytest

import moeaudio.gateway as gateway
from flux_world import FluxWorld, oracle_partition, planned_outcomes, write_corpus
from moeaudio.checkpoint import load_params
from moeaudio.cli import build_parser, main, resolve_args
from qa_world import oracle_captioner, rule_reader, synthetic_items

FAST = ["--steps", "6", "--records", "8", "--batch-size", "2", "--d-model", "8", "--expert-hidden", "8"]


def test_help_lists_subcommands(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for name in ("train-demo", "mix-plan", "dataflux", "eval"):
        assert name in out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train-demo", "--bogus"]) == 1
    assert main([]) == 1


def test_train_demo_reduces_loss_and_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-demo", "--steps", "200", "--seed", "7", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_l_ntp"] < summary["initial_l_ntp"]
    for name in summary["files"]:
        assert (out / name).exists()
    assert (out / "loss_curves.png").read_bytes()[:4] == b"\x89PNG"
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 200
    header = capsys.readouterr().out.splitlines()[0]
    assert header.split("\t") == ["stage", "steps", "first_l_ntp", "last_l_ntp"]


def test_align_only_run_leaves_backbone_untouched(tmp_path):
    out = tmp_path / "align"
    assert main(["train-demo", "--stages", "align", "--out", str(out)] + FAST) == 0
    init, final = load_params(out / "checkpoint_init"), load_params(out / "checkpoint")
    backbone = [k for k in init if k.startswith("backbone/")]
    adapter = [k for k in init if k.startswith("adapter/")]
    assert backbone and adapter
    assert all(np.array_equal(init[k], final[k]) for k in backbone)
    assert any(not np.array_equal(init[k], final[k]) for k in adapter)


def test_negative_aux_weight_is_config_error(tmp_path, capsys):
    assert main(["train-demo", "--aux-weight", "-0.1", "--out", str(tmp_path)]) == 2
    assert "aux_weight" in capsys.readouterr().err


def test_train_demo_is_bit_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["train-demo", "--seed", "3", "--out", str(tmp_path / name)] + FAST) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    a, b = load_params(tmp_path / "a" / "checkpoint"), load_params(tmp_path / "b" / "checkpoint")
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_mix_plan_stage_one(tmp_path, capsys):
    assert main(["mix-plan", "--stage", "1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "summary.json").read_text())
    for cat in report["categories"].values():
        assert abs(cat["observed"] - cat["target"]) <= 0.01
    assert set(report["categories"]) == {"audio_unimodal", "audio_text_mapping", "interleaving"}
    assert (tmp_path / "frequencies.png").stat().st_size > 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "task\tcategory\ttarget\tobserved\tcount"


def test_mix_plan_with_token_budget_and_custom_mixture(tmp_path):
    ini = tmp_path / "mix.ini"
    ini.write_text("[config]\nstage = align\nweight.asr = 0.5\nweight.tts = 0.5\ntext_ratio = 0\n")
    assert main(["mix-plan", "--mixture", str(ini), "--draws", "1000", "--token-budget", "2000",
                 "--records", "20", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert set(report["tasks"]) == {"asr", "tts"} and report["plan"]["tokens"] <= 2000
    assert (tmp_path / "o" / "plan.jsonl").exists()
    ini.write_text("[mixture]\nstage = align\n")
    assert main(["mix-plan", "--mixture", str(ini), "--out", str(tmp_path / "o")]) == 2


def test_eval_wer_literal_and_files(tmp_path, capsys):
    assert main(["eval", "wer", "--ref", "the cat sat", "--hyp", "the cat"]) == 0
    row = capsys.readouterr().out.splitlines()[1].split("\t")
    assert row[:5] == ["wer", "0.333333", "0", "0", "1"]
    (tmp_path / "ref.txt").write_text("a b c\nd e\n")
    (tmp_path / "hyp.txt").write_text("a b c\nd\n")
    assert main(["eval", "cer", "--ref", str(tmp_path / "ref.txt"), "--hyp", str(tmp_path / "hyp.txt"),
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["rate"] == 1 / 5
    (tmp_path / "short.txt").write_text("a\n")
    assert main(["eval", "wer", "--ref", str(tmp_path / "ref.txt"), "--hyp", str(tmp_path / "short.txt")]) == 2


def patch_clients(monkeypatch, transports):
    real = gateway.ModelClient

    def factory(endpoint, request_log=None):
        return real(endpoint, transports[endpoint.role], request_log=request_log, sleep=lambda s: None)
    monkeypatch.setattr(gateway, "ModelClient", factory)


def write_endpoints(path, roles):
    path.write_text(json.dumps({r.value: {"base_url": "http://mock", "model": r.value} for r in roles}))
    return path


def test_dataflux_run_through_cli(tmp_path, monkeypatch, capsys):
    outcomes = planned_outcomes(15, seed=21)
    manifest = write_corpus(tmp_path, outcomes)
    world = FluxWorld(outcomes)
    patch_clients(monkeypatch, world.transports)
    endpoints = write_endpoints(tmp_path / "ep.json", world.transports)
    out = tmp_path / "flux"
    assert main(["dataflux", "run", "--input", str(manifest), "--endpoints", str(endpoints),
                 "--out", str(out), "--parallelism", "3"]) == 0
    kept, discarded = oracle_partition(outcomes)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["kept"] == kept and summary["discarded"] == discarded
    assert (out / "requests.jsonl").exists()
    assert f"kept\t{kept}" in capsys.readouterr().out


def test_dataflux_rejects_bad_steps(tmp_path):
    manifest = write_corpus(tmp_path, {"a": "keep"})
    assert main(["dataflux", "run", "--input", str(manifest), "--endpoints", "x.json", "--steps", "1,4"]) == 2


def test_caption_qa_through_cli(tmp_path, monkeypatch, capsys):
    items = synthetic_items(12, seed=22)
    (tmp_path / "audio").mkdir()
    for it in items:
        (tmp_path / it.audio).write_bytes(f"ITEM:{it.id}".encode())
    rows = [{"id": it.id, "audio": it.audio, "question": it.question, "choices": list(it.choices),
             "gold": it.gold, "category": it.category} for it in items]
    (tmp_path / "items.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    transports = {gateway.Role.CAPTIONER: oracle_captioner(items), gateway.Role.QA_READER: rule_reader()}
    patch_clients(monkeypatch, transports)
    endpoints = write_endpoints(tmp_path / "ep.json", transports)
    out = tmp_path / "qa"
    assert main(["eval", "caption-qa", "--items", str(tmp_path / "items.jsonl"), "--endpoints", str(endpoints),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["accuracy"] == 1.0 and report["total"] == 12
    assert (out / "accuracy.png").exists() and (out / "results.jsonl").exists()
    assert capsys.readouterr().out.splitlines()[-1].split() == ["ALL", "12", "12", "1.0000"]


def test_settings_precedence(tmp_path):
    parser = build_parser()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 5, "lr": 0.5, "optimizer": "sgd"}))
    args = resolve_args(parser, ["train-demo", "--config", str(cfg), "--lr", "0.2"], environ={})
    assert (args.steps, args.lr, args.optimizer) == (5, 0.2, "sgd")
    args = resolve_args(parser, ["train-demo", "--config", str(cfg), "--lr", "0.2"],
                        environ={"MOEAUDIO_LR": "0.3", "MOEAUDIO_STEPS": "9"})
    assert (args.steps, args.lr) == (9, 0.3)
    ini = tmp_path / "c.ini"
    ini.write_text("[config]\nsteps = 4\n")
    assert resolve_args(parser, ["train-demo", "--config", str(ini)], environ={}).steps == 4


@pytest.mark.parametrize("content", ['{"no_such_flag": 1}', '{"steps": "many"}', "[1]", "not json"])
def test_bad_config_files_are_config_errors(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert main(["train-demo", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_bad_env_value_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv("MOEAUDIO_STEPS", "lots")
    assert main(["train-demo", "--out", str(tmp_path)]) == 2
