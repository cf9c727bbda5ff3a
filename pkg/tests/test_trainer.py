import numpy as np
import pytest

from dxcoder.corpus import SyntheticConfig, build_input, generate_synthetic
from dxcoder.model import ModelConfig, assemble_batch, backward, init, partition_of
from dxcoder.pipeline import build_dataset, evaluate_model
from dxcoder.splitter import stratified_split
from dxcoder.tokenizer import build_vocab
from dxcoder.trainer import (
    AdamW,
    EarlyStopper,
    EpochStats,
    TrainConfig,
    TrainerError,
    TrainLog,
    log_to_csv,
    log_to_json,
    lr_at,
    run_replicates,
    train,
)


# --- learning-rate schedule ---------------------------------------------------


def test_lr_schedule_exact_values():
    cfg = TrainConfig()  # peak 3e-5, warmup 5000
    assert lr_at(cfg, 0) == 0.0
    assert lr_at(cfg, 2500) == 1.5e-5
    assert lr_at(cfg, 5000) == 3e-5
    assert lr_at(cfg, 10**6) == 3e-5


def test_lr_schedule_is_linear_during_warmup():
    cfg = TrainConfig(peak_lr=1e-3, warmup_steps=100)
    for step in range(0, 101):
        assert lr_at(cfg, step) == 1e-3 * (step / 100)


def test_lr_rejects_negative_step():
    with pytest.raises(TrainerError):
        lr_at(TrainConfig(), -1)


# --- config validation ---------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"batch_size": 0},
        {"peak_lr": 0.0},
        {"warmup_steps": 0},
        {"max_epochs": 0},
        {"patience": 0},
        {"patience": 9, "max_epochs": 8},
        {"beta1": 1.0},
        {"beta2": 0.0},
        {"weight_decay": -0.1},
        {"threshold": 1.5},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(TrainerError):
        TrainConfig(**kwargs)


# --- optimizer ------------------------------------------------------------------


def test_adamw_zero_gradient_shrinks_by_exact_decay_factor():
    cfg = TrainConfig(peak_lr=1e-2, weight_decay=0.01)
    opt = AdamW(cfg)
    theta = np.array([1.0, -2.0, 0.5, 1e6])
    params = {"w": theta.copy()}
    lr = 1e-2
    expected = theta.copy()
    for _ in range(5):
        opt.step(params, {"w": np.zeros_like(theta)}, lr)
        expected *= 1.0 - lr * cfg.weight_decay
        np.testing.assert_array_equal(params["w"], expected)


def test_adamw_single_step_matches_hand_formula():
    cfg = TrainConfig(weight_decay=0.01)
    opt = AdamW(cfg)
    theta0 = 0.5
    g = 0.2
    lr = 0.1
    params = {"w": np.array([theta0])}
    opt.step(params, {"w": np.array([g])}, lr)
    # t=1: bias correction makes m_hat = g and v_hat = g^2
    update = g / (abs(g) + cfg.eps)
    expected = theta0 * (1.0 - lr * cfg.weight_decay) - lr * update
    assert params["w"][0] == pytest.approx(expected, abs=1e-15)


def test_adamw_two_steps_track_reference_moments():
    cfg = TrainConfig(weight_decay=0.0)
    opt = AdamW(cfg)
    params = {"w": np.array([1.0])}
    grads = [np.array([0.3]), np.array([-0.1])]
    lr = 0.05

    m = v = 0.0
    theta = 1.0
    for t, g in enumerate(grads, start=1):
        opt.step(params, {"w": g.copy()}, lr)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g[0]
        v = cfg.beta2 * v + (1 - cfg.beta2) * g[0] ** 2
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        assert params["w"][0] == pytest.approx(theta, abs=1e-15)


def test_adamw_decay_applies_even_when_moments_are_warm():
    cfg = TrainConfig(weight_decay=0.1)
    opt = AdamW(cfg)
    params = {"w": np.array([2.0])}
    opt.step(params, {"w": np.array([1.0])}, 0.01)
    before = params["w"].copy()
    opt.step(params, {"w": np.array([0.0])}, 0.01)
    # zero grad leaves residual momentum, but the decay factor still applies
    assert abs(params["w"][0]) < abs(before[0])


# --- early stopping -------------------------------------------------------------


def test_early_stopper_worked_example():
    stopper = EarlyStopper(patience=5)
    sequence = [0.40, 0.42, 0.41, 0.41, 0.41, 0.41, 0.41]
    stops = [stopper.update(epoch, f1) for epoch, f1 in enumerate(sequence, start=1)]
    assert stops == [False, False, False, False, False, False, True]
    assert stopper.best_epoch == 2
    assert stopper.best == 0.42


def test_early_stopper_requires_strict_improvement():
    stopper = EarlyStopper(patience=2)
    assert not stopper.update(1, 0.5)
    assert not stopper.update(2, 0.5)  # tie does not reset patience
    assert stopper.update(3, 0.5)
    assert stopper.best_epoch == 1


def test_early_stopper_resets_streak_on_improvement():
    stopper = EarlyStopper(patience=3)
    for epoch, value in enumerate([0.1, 0.05, 0.05, 0.2, 0.1, 0.1], start=1):
        assert not stopper.update(epoch, value)
    assert stopper.best_epoch == 4


# --- train log ------------------------------------------------------------------


def _stats(epoch, f1):
    return EpochStats(epoch=epoch, train_loss=0.5, val_f1=f1, lr=1e-4, seconds=0.1)


def test_train_log_rejects_best_epoch_that_is_not_the_maximum():
    with pytest.raises(TrainerError):
        TrainLog(epochs=(_stats(1, 0.3), _stats(2, 0.6)), best_epoch=1, stop_reason="max_epochs")


def test_train_log_rejects_unknown_stop_reason():
    with pytest.raises(TrainerError):
        TrainLog(epochs=(_stats(1, 0.3),), best_epoch=1, stop_reason="boredom")


def test_train_log_rejects_empty_epochs():
    with pytest.raises(TrainerError):
        TrainLog(epochs=(), best_epoch=0, stop_reason="max_epochs")


def test_log_serialization_round():
    log = TrainLog(epochs=(_stats(1, 0.3), _stats(2, 0.6)), best_epoch=2, stop_reason="early_stop")
    csv_text = log_to_csv(log)
    lines = csv_text.splitlines()
    assert lines[0] == "epoch,train_loss,val_f1,lr,seconds"
    assert len(lines) == 3
    assert csv_text.endswith("\n")
    summary = log_to_json(log)
    assert '"best_epoch": 2' in summary
    assert '"stop_reason": "early_stop"' in summary


# --- full training loop ---------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    corpus = generate_synthetic(SyntheticConfig(n_records=80, n_codes=6), seed=7)
    plan = stratified_split(corpus, (0.7, 0.15, 0.15), seed=1)
    texts = [build_input(r, ("diagnosis", "assessment")) for r in corpus.records]
    vocab = build_vocab(texts, max_len=32)
    splits = build_dataset(corpus, plan, vocab)
    model_config = ModelConfig(
        vocab_size=vocab.size, n_classes=corpus.n_codes,
        max_len=vocab.max_len, embed_dim=16, n_blocks=1, n_heads=2, dropout=0.1,
    )
    return model_config, splits


FAST = dict(batch_size=16, peak_lr=5e-3, warmup_steps=10, max_epochs=4, patience=4, seed=0)


def test_train_is_deterministic_per_seed(world):
    model_config, splits = world
    config = TrainConfig(**FAST)
    runs = []
    for _ in range(2):
        state = init(model_config, seed=3)
        best, log = train(state, splits["train"], splits["validation"], config)
        runs.append((best, log))
    (best_a, log_a), (best_b, log_b) = runs
    assert [e.train_loss for e in log_a.epochs] == [e.train_loss for e in log_b.epochs]
    assert [e.val_f1 for e in log_a.epochs] == [e.val_f1 for e in log_b.epochs]
    assert [e.lr for e in log_a.epochs] == [e.lr for e in log_b.epochs]
    assert log_a.best_epoch == log_b.best_epoch
    for name in best_a.params:
        np.testing.assert_array_equal(best_a.params[name], best_b.params[name])


def test_train_seed_changes_the_trajectory(world):
    model_config, splits = world
    state_a = init(model_config, seed=3)
    state_b = init(model_config, seed=3)
    _, log_a = train(state_a, splits["train"], splits["validation"], TrainConfig(**FAST))
    _, log_b = train(
        state_b, splits["train"], splits["validation"], TrainConfig(**{**FAST, "seed": 9})
    )
    assert [e.train_loss for e in log_a.epochs] != [e.train_loss for e in log_b.epochs]


def test_train_returns_state_of_the_best_epoch(world):
    model_config, splits = world
    config = TrainConfig(**FAST)
    state = init(model_config, seed=3)
    best, log = train(state, splits["train"], splits["validation"], config)
    best_logged = max(e.val_f1 for e in log.epochs)
    by_epoch = {e.epoch: e.val_f1 for e in log.epochs}
    assert by_epoch[log.best_epoch] == best_logged
    # re-scoring the returned state reproduces the logged best value exactly
    rescored = evaluate_model(best, splits["validation"], config.threshold).weighted_f1
    assert rescored == best_logged


def test_logged_lr_matches_schedule_at_global_step(world):
    model_config, splits = world
    config = TrainConfig(batch_size=16, peak_lr=1e-3, warmup_steps=1000,
                         max_epochs=3, patience=3, seed=0)
    state = init(model_config, seed=3)
    _, log = train(state, splits["train"], splits["validation"], config)
    steps_per_epoch = -(-len(splits["train"]) // config.batch_size)
    for stats in log.epochs:
        assert stats.lr == lr_at(config, stats.epoch * steps_per_epoch)


def test_early_stop_fires_and_is_reported(world):
    model_config, splits = world
    # patience 1 forces a stop at the first non-improving epoch
    config = TrainConfig(**{**FAST, "patience": 1, "max_epochs": 30})
    state = init(model_config, seed=3)
    _, log = train(state, splits["train"], splits["validation"], config)
    assert log.stop_reason == "early_stop"
    assert len(log.epochs) < 30
    assert log.epochs[-1].val_f1 <= max(e.val_f1 for e in log.epochs)


def test_max_epochs_stop_reason(world):
    model_config, splits = world
    config = TrainConfig(**{**FAST, "max_epochs": 2, "patience": 2})
    state = init(model_config, seed=3)
    _, log = train(state, splits["train"], splits["validation"], config)
    assert log.stop_reason in ("max_epochs", "early_stop")
    if log.stop_reason == "max_epochs":
        assert len(log.epochs) == 2


def test_frozen_backbone_is_bitwise_unchanged_after_training(world):
    model_config, splits = world
    frozen_config = ModelConfig(
        vocab_size=model_config.vocab_size, n_classes=model_config.n_classes,
        max_len=model_config.max_len, embed_dim=16, n_blocks=1, n_heads=2,
        dropout=0.1, backbone_frozen=True,
    )
    state = init(frozen_config, seed=3)
    initial = {k: v.copy() for k, v in state.params.items()}
    best, _ = train(state, splits["train"], splits["validation"], TrainConfig(**FAST))
    head_changed = False
    for name, arr in best.params.items():
        if partition_of(name) == "backbone":
            np.testing.assert_array_equal(arr, initial[name])
        else:
            head_changed = head_changed or not np.array_equal(arr, initial[name])
    assert head_changed


def test_train_rejects_empty_splits(world):
    model_config, splits = world
    empty = splits["train"].__class__(
        name="train", record_ids=[], sequences=[],
        targets=np.zeros((0, len(splits["train"].codes))),
        codes=splits["train"].codes, n_truncated=0,
    )
    state = init(model_config, seed=0)
    with pytest.raises(TrainerError):
        train(state, empty, splits["validation"], TrainConfig(**FAST))
    with pytest.raises(TrainerError):
        train(state, splits["train"], empty, TrainConfig(**FAST))


def test_loss_decreases_on_a_fixed_batch():
    # fresh tiny model, no dropout, LR already at plateau
    rng = np.random.default_rng(0)
    config = ModelConfig(vocab_size=30, n_classes=4, max_len=10,
                         embed_dim=8, n_blocks=1, n_heads=2, dropout=0.0)
    state = init(config, seed=1)
    seqs = [[2] + list(rng.integers(3, 30, size=7)) for _ in range(8)]
    ids, mask = assemble_batch(seqs)
    targets = (rng.random((8, 4)) < 0.3).astype(np.float64)
    train_config = TrainConfig(peak_lr=1e-2, warmup_steps=1, weight_decay=0.0)
    opt = AdamW(train_config)
    losses = []
    for step in range(1, 11):
        loss, grads = backward(state, ids, mask, targets, train_mode=True, dropout_seed=step)
        opt.step(state.params, grads, lr_at(train_config, step))
        losses.append(loss)
    non_decreasing = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert non_decreasing <= 2
    assert losses[-1] < losses[0]


def test_memorizes_small_synthetic_corpus(world):
    # scaled-down overfit check; the acceptance suite runs the full-size one
    model_config, splits = world
    config = TrainConfig(batch_size=16, peak_lr=4e-3, warmup_steps=20,
                         max_epochs=30, patience=30, seed=0)
    state = init(model_config, seed=3)
    best, log = train(state, splits["train"], splits["train"], config)
    report = evaluate_model(best, splits["train"], config.threshold)
    assert report.exact_match >= 90.0, f"train EM {report.exact_match}"


# --- replicates -----------------------------------------------------------------


def test_run_replicates_counts_and_determinism(world):
    model_config, splits = world
    config = TrainConfig(**{**FAST, "max_epochs": 2, "patience": 2})
    reports = run_replicates(
        model_config, splits["train"], splits["validation"], splits["test"],
        config, seeds=[4, 5, 6],
    )
    assert len(reports) == 3
    again = run_replicates(
        model_config, splits["train"], splits["validation"], splits["test"],
        config, seeds=[4, 5, 6],
    )
    assert reports == again


def test_run_replicates_identical_seeds_identical_reports(world):
    model_config, splits = world
    config = TrainConfig(**{**FAST, "max_epochs": 1, "patience": 1})
    reports = run_replicates(
        model_config, splits["train"], splits["validation"], splits["test"],
        config, seeds=[7, 7],
    )
    assert reports[0] == reports[1]


def test_run_replicates_rejects_single_seed(world):
    model_config, splits = world
    with pytest.raises(TrainerError):
        run_replicates(
            model_config, splits["train"], splits["validation"], splits["test"],
            TrainConfig(**FAST), seeds=[1],
        )
