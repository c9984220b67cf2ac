import csv
import json

import numpy as np
import pytest

from textgail import checkpoint as ck
from textgail import cli, metrics
from textgail import generator as gen
from textgail import orchestrator as orch
from textgail.checkpoint import Checkpoint, CheckpointError
from textgail.config import ExperimentConfig
from textgail.data import write_jsonl
from textgail.errors import ConfigError, NumericsError, TrainingAborted

TINY = dict(synthetic_grammar="ABAB", synthetic_train=60, synthetic_val=20, d_model=16, n_layers=1, n_heads=2,
            max_len=24, learning_rate=3e-3, warmup_steps=10, total_steps=6, eval_every=2, batch_size=8,
            ppo_buffer_size=16, ppo_mini_batch_size=8, max_new_tokens=18, seed=0)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


# --- config -----------------------------------------------------------------

def test_config_defaults():
    cfg = ExperimentConfig(synthetic_grammar="ABAB")
    assert (cfg.ppo_buffer_size, cfg.ppo_mini_batch_size, cfg.ppo_epoch) == (128, 8, 1)
    assert (cfg.ppo_epsilon, cfg.mix_human_ratio, cfg.human_reward_constant) == (0.2, 0.3, 2.0)
    assert (cfg.learning_rate, cfg.warmup_steps, cfg.batch_size) == (1e-5, 100, 32)


def test_config_parsing(tmp_path):
    text = "# comment\nsynthetic_grammar = ABAB\nppo_epsilon = 0.1\ntotal_steps = 50  # trailing\n"
    cfg = ExperimentConfig.loads(text)
    assert cfg.ppo_epsilon == 0.1 and cfg.total_steps == 50
    assert ExperimentConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("text", ["bogus_key = 1\nsynthetic_grammar = ABAB", "synthetic_grammar ABAB",
                                  "synthetic_grammar = ABAB\ntotal_steps = 1.5",
                                  "synthetic_grammar = ABAB\nppo_buffer_size = 10", "seed = 1"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.loads(text)


def test_config_missing_file(tmp_path):
    (tmp_path / "c.cfg").write_text("train_path = nowhere.jsonl\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.cfg")


def test_config_hash_tracks_values():
    assert tiny().hash() == tiny().hash()
    assert tiny().hash() != tiny(seed=1).hash()


# --- checkpoint format ------------------------------------------------------

def test_checkpoint_header_layout():
    blob = ck.dumps({"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(1)}, None)
    assert blob.startswith(b"TGAIL01\nw 2x3\nb 1\n\n")
    assert len(blob) == len(b"TGAIL01\nw 2x3\nb 1\n\n") + 7 * 4
    arrays, meta = ck.loads(blob)
    np.testing.assert_array_equal(arrays["w"], np.arange(6).reshape(2, 3))
    assert meta is None


def test_checkpoint_byte_count_validated():
    blob = ck.dumps({"w": np.ones(3)})
    for bad in (blob[:-1], blob + b"\0", b"XXXX" + blob[4:]):
        with pytest.raises(CheckpointError):
            ck.loads(bad)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    res = orch.run_textgail(tiny(total_steps=2), tmp_path)
    blob = res.latest_path.read_bytes()
    again = Checkpoint.from_bytes(blob)
    assert again.to_bytes() == blob
    again.save(tmp_path / "copy.ckpt")
    assert (tmp_path / "copy.ckpt").read_bytes() == blob


def test_checkpoint_hash_mismatch_rejected(tmp_path):
    res = orch.run_mle_baseline(tiny(total_steps=2), tmp_path)
    with pytest.raises(CheckpointError):
        Checkpoint.load(res.latest_path, expect_hash=tiny(seed=9).hash())


# --- runs -------------------------------------------------------------------

def test_gail_run_writes_csv_and_checkpoints(tmp_path):
    res = orch.run_textgail(tiny(), tmp_path)
    rows = list(csv.reader(res.csv_path.open()))
    assert rows[0] == ["step", "mean_raw_reward", "mean_ratio", "d_loss", "g_loss", "val_ppl"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5", "6"]
    assert [bool(r[5]) for r in rows[1:]] == [False, True, False, True, False, True]
    assert res.best_path.exists() and res.checkpoint.step == 6
    assert res.checkpoint.disc is not None and res.checkpoint.gen_opt is not None


def test_gail_run_is_reproducible(tmp_path):
    a = orch.run_textgail(tiny(), tmp_path / "a")
    b = orch.run_textgail(tiny(), tmp_path / "b")
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.latest_path.read_bytes() == b.latest_path.read_bytes()


def test_resume_from_intermediate_checkpoint(tmp_path, monkeypatch):
    full = orch.run_textgail(tiny(), tmp_path / "full")
    out = tmp_path / "resumed"
    real = orch.train_step

    def stop_after_four(state, data, t, cfg):
        if t >= 4:
            raise KeyboardInterrupt
        return real(state, data, t, cfg)

    monkeypatch.setattr(orch, "train_step", stop_after_four)
    with pytest.raises(KeyboardInterrupt):
        orch.run_textgail(tiny(), out)
    monkeypatch.setattr(orch, "train_step", real)
    assert Checkpoint.load(out / "gail_latest.ckpt").step == 4
    res = orch.run_textgail(tiny(), out, resume=True)
    assert res.csv_path.read_bytes() == full.csv_path.read_bytes()
    assert res.latest_path.read_bytes() == full.latest_path.read_bytes()


def test_early_stopping_after_patience(tmp_path, monkeypatch):
    monkeypatch.setattr(metrics, "perplexity", lambda *a, **k: 5.0)
    res = orch.run_textgail(tiny(total_steps=40, eval_every=1, patience=5), tmp_path)
    # first evaluation sets the best, five more non-improving ones stop the run
    assert res.checkpoint.step == 6
    assert res.stop_reason == "perplexity stopped improving"


def test_fairness_stop_at_target(tmp_path):
    res = orch.run_textgail(tiny(total_steps=10, stop_at_perplexity=1e6), tmp_path)
    assert res.checkpoint.step == 2 and res.stop_reason == "reached target perplexity"


def test_three_numerics_failures_abort(tmp_path, monkeypatch):
    def fail(*a, **k):
        raise NumericsError("nan")

    monkeypatch.setattr(orch, "train_step", fail)
    with pytest.raises(TrainingAborted):
        orch.run_textgail(tiny(), tmp_path)


def test_isolated_numerics_failure_is_skipped(tmp_path, monkeypatch):
    real = orch.train_step

    def flaky(state, data, t, cfg):
        if t == 2:
            raise NumericsError("nan")
        return real(state, data, t, cfg)

    monkeypatch.setattr(orch, "train_step", flaky)
    res = orch.run_textgail(tiny(), tmp_path)
    steps = [r.split(",")[0] for r in res.csv_path.read_text().splitlines()[1:]]
    assert steps == ["1", "2", "4", "5", "6"]


def test_mle_baseline(tmp_path):
    cfg = tiny(total_steps=20, eval_every=5)
    exp = orch.prepare_data(cfg)
    untrained = gen.init_generator(cfg.gen_config(len(exp.vocab)), seed=cfg.seed)
    res = orch.run_mle_baseline(cfg, tmp_path / "a")
    assert metrics.perplexity(res.checkpoint.gen, exp.val) < metrics.perplexity(untrained, exp.val)
    again = orch.run_mle_baseline(cfg, tmp_path / "b")
    assert res.csv_path.read_bytes() == again.csv_path.read_bytes()
    assert list(csv.reader(res.csv_path.open()))[0] == ["step", "loss", "val_ppl"]


def test_shared_warmup_trajectory():
    cfg = tiny()
    exp = orch.prepare_data(cfg)
    a, _, la = orch.warm_start(exp)
    b, _, lb = orch.warm_start(exp)
    assert la == lb and a.equals(b)


def test_compare_runs(tmp_path):
    res = orch.run_mle_baseline(tiny(total_steps=4), tmp_path)
    exp = orch.prepare_data(tiny())
    out = tmp_path / "cmp.csv"
    rows = orch.compare_runs(res.latest_path, res.latest_path, exp.val, [0.5, 1.0], out, samples_per_temp=8,
                             max_new_tokens=10)
    table = list(csv.reader(out.open()))
    assert table[0] == ["temperature", "bleu_a", "div_a", "ppl_a", "bleu_b", "div_b", "ppl_b"]
    for r in rows:
        assert r[1:4] == r[4:7]


def test_compare_rejects_vocab_mismatch(tmp_path):
    a = orch.run_mle_baseline(tiny(total_steps=2), tmp_path / "a").latest_path
    b = orch.run_mle_baseline(tiny(total_steps=2, synthetic_grammar="ARITH", max_len=48), tmp_path / "b").latest_path
    with pytest.raises(ConfigError):
        orch.compare_runs(a, b, orch.prepare_data(tiny()).val, [1.0], samples_per_temp=4)


def test_examples_must_fit_max_len():
    with pytest.raises(ConfigError):
        orch.prepare_data(tiny(max_len=10))


def test_validity_rate_range(tmp_path):
    res = orch.run_mle_baseline(tiny(total_steps=4), tmp_path)
    rep = orch.validity_rate(res.checkpoint.gen, orch.prepare_data(tiny()).vocab, "ABAB", n=20)
    assert 0.0 <= rep.rate <= 1.0 and len(rep.samples) == 20


def test_jsonl_data_with_holdout(tmp_path):
    write_jsonl(tmp_path / "train.jsonl", [{"source": f"q{i % 3}", "target": f"a{i % 3} b"} for i in range(30)])
    (tmp_path / "c.cfg").write_text("task_mode = conditional\ntrain_path = train.jsonl\n")
    exp = orch.prepare_data(ExperimentConfig.load(tmp_path / "c.cfg"))
    assert len(exp.train) == 27 and len(exp.val) == 3


# --- CLI --------------------------------------------------------------------

def _write_cfg(path, **kw):
    path.write_text("".join(f"{k} = {v}\n" for k, v in {**TINY, **kw}.items()))
    return path


def test_cli_end_to_end(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "run.cfg")
    assert cli.main(["train-gail", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    ckpt = summary["checkpoint"]
    assert cli.main(["train-mle", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    capsys.readouterr()

    gen_out = tmp_path / "gen.jsonl"
    assert cli.main(["generate", "--ckpt", ckpt, "--temperature", "0.8", "--top-p", "0.9", "--n", "5",
                     "--out", str(gen_out)]) == 0
    recs = [json.loads(l) for l in gen_out.read_text().splitlines()]
    assert len(recs) == 5 and set(recs[0]) == {"source", "hypothesis", "log_prob"}
    assert all(r["log_prob"] <= 0 for r in recs)

    assert cli.main(["beam", "--ckpt", ckpt, "--beam", "4"]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"source", "hypothesis", "log_prob"}

    ref = tmp_path / "ref.jsonl"
    write_jsonl(ref, [{"text": "a b a b"}, {"text": "a b a b a b"}])
    assert cli.main(["evaluate", "--hyp", str(gen_out), "--ref", str(ref), "--mode", "unconditional"]) == 0
    line = capsys.readouterr().out
    assert line.count("\n") == 1 and {"bleu4", "self_bleu4", "distinct2"} <= set(json.loads(line))

    sweep = tmp_path / "sweep.csv"
    assert cli.main(["sweep", "--ckpt", ckpt, "--temps", "0.5:1.0:0.5", "--samples", "6", "--out", str(sweep)]) == 0
    assert sweep.exists() and sweep.with_suffix(".png").exists()

    cmp_csv = tmp_path / "cmp.csv"
    assert cli.main(["compare", "--a", ckpt, "--b", str(tmp_path / "mle_latest.ckpt"), "--temps", "1.0",
                     "--samples", "4", "--out", str(cmp_csv)]) == 0
    assert cmp_csv.with_suffix(".png").exists()

    pairs = tmp_path / "pairs.jsonl"
    write_jsonl(pairs, [{"source": "", "ending_a": "a b a b", "ending_b": "a a b b"}])
    assert cli.main(["classify", "--ckpt", ckpt, "--pairs", str(pairs)]) == 0
    assert json.loads(capsys.readouterr().out)["choice"] in ("A", "B")


def test_cli_conditional_evaluate(tmp_path, capsys):
    hyp, ref = tmp_path / "h.jsonl", tmp_path / "r.jsonl"
    write_jsonl(hyp, [{"source": "x", "hypothesis": "a b c"}, {"source": "y", "hypothesis": "d e"}])
    write_jsonl(ref, [{"source": "x", "target": "a b c"}, {"source": "y", "target": "d e f"}])
    assert cli.main(["evaluate", "--hyp", str(hyp), "--ref", str(ref), "--mode", "conditional"]) == 0
    assert 0 < json.loads(capsys.readouterr().out)["bleu4"] <= 1


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["train-gail", "--config", str(bad)]) == 2
    assert cli.main(["generate", "--ckpt", str(tmp_path / "missing.ckpt")]) == 2

    def abort(*a, **k):
        raise TrainingAborted("three strikes")

    monkeypatch.setattr(orch, "run_textgail", abort)
    assert cli.main(["train-gail", "--config", str(_write_cfg(tmp_path / "ok.cfg"))]) == 3


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
