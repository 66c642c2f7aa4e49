import json

import numpy as np
import pytest

from prepo import policy, trainer
from prepo.config import ConfigError, DatasetConfig, EvalConfig, ExperimentSpec, TrainConfig
from prepo.taskgen import Prompt, TaskSpec, generate_dataset

TASK = TaskSpec(5)
VOCAB = TASK.vocab


def small_config(**kw):
    base = dict(total_steps=3, candidate_batch=16, sub_batch=4, group_size=4, mini_batch=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(0, 64, (2, 3), TASK)


def read_metrics(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_zero_steps_writes_config_and_empty_metrics(tmp_path):
    spec = ExperimentSpec("empty", TrainConfig(total_steps=0), DatasetConfig(n_prompts=64), EvalConfig(n_prompts=4, k=2))
    trainer.run_experiment(spec, tmp_path)
    run = tmp_path / "empty"
    assert json.loads((run / "config_echo.json").read_text())["train"]["total_steps"] == 0
    assert (run / "metrics.jsonl").read_text() == ""
    assert (run / "checkpoint_0.bin").exists()
    meta = json.loads((run / "run_meta.json").read_text())
    assert meta["entropy_unit"] == "nats"
    assert set(json.loads((run / "eval.json").read_text())) >= {"pass_at_1_avg_k", "passrate_at_k"}


def test_two_identical_runs_are_byte_identical(tmp_path, data):
    cfg = small_config(total_steps=2)
    trainer.train(cfg, data, TASK, tmp_path / "a")
    trainer.train(cfg, data, TASK, tmp_path / "b")
    for name in ("metrics.jsonl", "ppl_trace.csv", "weights_hist.csv", "checkpoint_2.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_rollout_accounting(data):
    res = trainer.train(small_config(total_steps=10, sub_batch=4, group_size=8, mini_batch=16), data, TASK)
    counts = [m.rollout_count_cumulative for m in res.metrics]
    assert counts[-1] == 320
    assert counts == [4 * 8 * (s + 1) for s in range(10)]


def test_metric_sanity(data):
    res = trainer.train(small_config(total_steps=6, learning_rate=2e-2), data, TASK)
    for m in res.metrics:
        for ratio in (m.zero_advantage_ratio, m.all_correct_ratio, m.clip_fraction, m.mean_reward):
            assert 0.0 <= ratio <= 1.0
        assert m.all_correct_ratio <= m.zero_advantage_ratio
        assert m.selected_ppl_min <= m.selected_ppl_mean <= m.selected_ppl_max
        assert m.policy_entropy > 0


def test_effective_batch_size_logged(data):
    on = trainer.train(small_config(selection="prepo"), data, TASK)
    off = trainer.train(small_config(selection="random"), data, TASK)
    assert all(m.effective_batch_size == 1.0 for m in off.metrics)
    assert all(m.effective_batch_size > 0 for m in on.metrics)


def test_effective_batch_size_exact_on_equal_lengths(data):
    # with max_rollout_len=1 every rollout has exactly one token
    res = trainer.train(small_config(selection="prepo", max_rollout_len=1, total_steps=4), data, TASK)
    assert [m.effective_batch_size for m in res.metrics] == [1.0] * 4


def test_mode_consistency(data):
    cfg = small_config(selection="prepo", weighting=False)
    a = trainer.train(cfg, data, TASK)
    b = trainer.train(small_config(selection="ppl_schedule_only"), data, TASK)
    assert [m.loss for m in a.metrics] == [m.loss for m in b.metrics]
    assert np.array_equal(a.params.vector, b.params.vector)
    assert small_config(selection="random").use_weighting is False
    assert small_config(selection="prepo").use_weighting is True


def test_ppl_schedule_window_slides(data):
    cfg = small_config(selection="ppl_schedule_only", total_steps=5)
    res = trainer.train(cfg, data, TASK)
    assert [m.window_start for m in res.metrics] == [0, 3, 6, 9, 12]
    assert [m.rho for m in res.metrics] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_weight_gradient_flag_runs(data):
    res = trainer.train(small_config(weight_gradient=True), data, TASK)
    assert len(res.metrics) == 3
    with pytest.raises(ConfigError):
        small_config(selection="random", weight_gradient=True).validate()


def test_validation_errors(data):
    with pytest.raises(ConfigError, match="K <= |B|"):
        trainer.train(small_config(sub_batch=32), data, TASK)
    with pytest.raises(ConfigError):
        trainer.train(small_config(mini_batch=6), data, TASK)
    with pytest.raises(ValueError):
        trainer.train(small_config(candidate_batch=128, sub_batch=4), data, TASK)


def test_nan_aborts_with_dump(tmp_path, data, monkeypatch):
    real = trainer.adamw_step
    calls = []

    def poisoned(params, grad, state, *args):
        calls.append(1)
        new, st = real(params, grad, state, *args)
        if len(calls) == 3:
            new = new.copy()
            new[0] = np.nan
        return new, st

    monkeypatch.setattr(trainer, "adamw_step", poisoned)
    with pytest.raises(trainer.TrainingDivergedError):
        trainer.train(small_config(total_steps=5), data, TASK, tmp_path)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 1
    good = policy.load_checkpoint(tmp_path / "checkpoint_last_good.bin")
    assert np.all(np.isfinite(good.vector))
    assert len(read_metrics(tmp_path / "metrics.jsonl")) == 1


# --- evaluation ---------------------------------------------------------------


def test_correctness_summary_hand_case():
    res = trainer.correctness_summary(np.array([[1, 0], [0, 0]]))
    assert res.pass_at_1 == 0.25
    assert res.passrate == 0.5


def rigged_policy(answer_of):
    """A policy that puts almost all mass on ``answer_of(prompt)`` then eos."""
    layout = policy.PolicyLayout(VOCAB.size, VOCAB.pad_id)
    params = policy.zeros(layout)
    arrays = params.arrays
    # logits depend only on the slot holding the last context token
    last = layout.window - 1
    d = layout.embed_dim
    arrays["embed"][last, :, :] = 0.0
    for tok in range(VOCAB.size):
        arrays["embed"][last, tok, tok % d] = 8.0 * layout.window
    arrays["w_hidden"][:, :] = np.eye(d, layout.hidden_dim) * 1.0
    for tok in range(VOCAB.size):
        target = answer_of(tok)
        arrays["w_out"][tok % d, target] = 60.0
    return params.replace(layout.flatten(arrays))


def test_evaluate_always_correct_and_always_wrong():
    # every prompt ends in "=", so map "=" -> the answer and any digit -> eos
    prompts = [p for p in generate_dataset(1, 5, (1, 1), TASK) if p.answer == (VOCAB.id("2"),)][:3]
    assert prompts
    eq = VOCAB.id("=")
    good = rigged_policy(lambda tok: VOCAB.id("2") if tok == eq else VOCAB.eos_id)
    res = trainer.evaluate(good, prompts, 4, 1.0, VOCAB)
    assert (res.pass_at_1, res.passrate) == (1.0, 1.0)
    bad = rigged_policy(lambda tok: VOCAB.id("3") if tok == eq else VOCAB.eos_id)
    res = trainer.evaluate(bad, prompts, 4, 1.0, VOCAB)
    assert (res.pass_at_1, res.passrate) == (0.0, 0.0)


def test_evaluate_errors():
    params = policy.zeros(policy.PolicyLayout(VOCAB.size, VOCAB.pad_id))
    with pytest.raises(ValueError):
        trainer.evaluate(params, [], 2, 1.0, VOCAB)
    with pytest.raises(ValueError):
        trainer.evaluate(params, generate_dataset(0, 2, (1, 1), TASK), 0, 1.0, VOCAB)


def test_eval_stream_is_separate_from_training(data):
    params = trainer.initial_params(small_config(), VOCAB)
    a = trainer.evaluate(params, data[:10], 4, 1.0, VOCAB, seed=3)
    b = trainer.evaluate(params, data[:10], 4, 1.0, VOCAB, seed=3)
    assert np.array_equal(a.per_prompt, b.per_prompt)


def test_ppl_passrate_correlation_consistency(data):
    from prepo.stats import spearman

    params = trainer.initial_params(small_config(), VOCAB)
    corr, ppl, solved = trainer.ppl_passrate_correlation(params, data[:30], 4, VOCAB)
    assert corr.approximate_p
    rho, p = spearman(ppl, solved)
    assert (corr.rho, corr.p_value) == (rho, p)
    np.testing.assert_allclose(ppl, policy.prompt_ppls(params, data[:30]))
    with pytest.raises(ValueError):
        trainer.ppl_passrate_correlation(params, data[:2], 4, VOCAB)


def test_prompt_type_roundtrip_in_run_dir(tmp_path):
    from prepo.taskgen import load_dataset

    spec = ExperimentSpec("r", small_config(total_steps=1), DatasetConfig(n_prompts=32), EvalConfig(n_prompts=5, k=2))
    trainer.run_experiment(spec, tmp_path)
    train_set = load_dataset(tmp_path / "r" / "dataset.txt")
    eval_set = load_dataset(tmp_path / "r" / "eval_dataset.txt")
    assert len(train_set) == 32 and len(eval_set) == 5
    assert not {p.tokens for p in train_set} & {p.tokens for p in eval_set}
    assert all(isinstance(p, Prompt) for p in eval_set)
    with pytest.raises(FileExistsError):
        trainer.run_experiment(spec, tmp_path)
