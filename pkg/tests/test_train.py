import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macsswin.data import ClassCounts, ClipSample
from macsswin.exceptions import ConfigError, ParameterError, TrainingError, ValidationError
from macsswin.models import VidMacsSwin
from macsswin.nn import Parameter
from macsswin.tensor import Tape, Tensor, grad_check
from macsswin.train import (
    AdamWHyper,
    AdamWState,
    ClipDataset,
    FrameDataset,
    LossWeights,
    ScheduleSpec,
    TrainConfig,
    adamw_step,
    get_train_config,
    lr_at,
    no_weight_decay,
    train_image,
    train_video,
    weighted_ce,
)


def _logits_for(p_y):
    # two-class logits whose Y softmax score is p_y
    return np.array([[0.0, math.log(p_y / (1 - p_y))]])


def _bce(z, y):
    p = np.exp(z[:, 1]) / np.exp(z).sum(1)
    return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))


# -- loss --------------------------------------------------------------------
def test_weighted_ce_examples():
    loss = weighted_ce(Tensor(_logits_for(0.8)), [1], LossWeights(0.2, 0.8)).item()
    assert loss == pytest.approx(-0.8 * math.log(0.8), abs=1e-12)
    assert round(loss, 5) == 0.17851
    perfect = Tensor(np.array([[-40.0, 40.0], [40.0, -40.0]]))
    assert weighted_ce(perfect, [1, 0], LossWeights(0.2, 0.8)).item() <= -math.log(1 - 1e-7) * 0.8 + 1e-12
    with pytest.raises(ValidationError):
        weighted_ce(Tensor(np.zeros((0, 2))), [])
    with pytest.raises(ValidationError):
        weighted_ce(Tensor(np.zeros((2, 3))), [0, 1])


def test_loss_weights_contract():
    assert LossWeights.from_counts(ClassCounts(800, 200)) == LossWeights(0.2, 0.8)
    for bad in ((0.3, 0.3), (-0.1, 1.1)):
        with pytest.raises(ParameterError):
            LossWeights(*bad)


batches = st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-6, 6), min_size=2 * n, max_size=2 * n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@settings(max_examples=60, deadline=None)
@given(batches)
def test_balanced_weights_halve_binary_ce(batch):
    vals, y = batch
    z = np.array(vals).reshape(-1, 2)
    got = weighted_ce(Tensor(z), y).item()
    assert got == pytest.approx(0.5 * _bce(z, np.array(y)), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(batches, st.randoms(use_true_random=False))
def test_loss_permutation_invariant(batch, rnd):
    vals, y = batch
    z = np.array(vals).reshape(-1, 2)
    perm = list(range(len(y)))
    rnd.shuffle(perm)
    w = LossWeights(0.2, 0.8)
    a = weighted_ce(Tensor(z), y, w).item()
    b = weighted_ce(Tensor(z[perm]), np.array(y)[perm], w).item()
    assert a == pytest.approx(b, rel=1e-14, abs=1e-15)
    assert a >= 0


def test_weighted_ce_gradient():
    z = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    y = np.array([1, 0, 0, 1, 0])
    assert grad_check(lambda t: weighted_ce(t, y, LossWeights(0.2, 0.8)), z) < 1e-4


# -- optimizer -------------------------------------------------------------
def _param(value, name="w"):
    p = Parameter(np.asarray(value, dtype=np.float64))
    return [(name, p)], p


def test_adamw_zero_grad_no_decay_is_identity():
    params, p = _param([1.0, -2.0, 3.0])
    p.grad = np.zeros(3)
    adamw_step(params, AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_adamw_first_step_is_about_lr():
    params, p = _param(np.zeros((1, 1)))
    p.grad = np.ones((1, 1))
    state = adamw_step(params, AdamWState(), AdamWHyper(lr=0.01, weight_decay=0.0))
    assert p.data[0, 0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
    assert state.t == 1
    assert state.m["w"].shape == (1, 1)


def test_adamw_minimises_square():
    params, p = _param(np.ones((1, 1)))
    state = AdamWState()
    for _ in range(100):
        p.grad = 2 * p.data
        adamw_step(params, state, AdamWHyper(lr=0.1, weight_decay=0.0))
    assert abs(p.data[0, 0]) < 0.1
    assert state.t == 100


def test_adamw_decoupled_decay_and_exclusions():
    w = Parameter(np.full((2, 2), 2.0))
    b = Parameter(np.full(2, 2.0))
    table = Parameter(np.full((3, 2), 2.0))
    named = [("fc.weight", w), ("fc.bias", b), ("attn.relative_position_bias_table", table)]
    for _, p in named:
        p.grad = np.zeros(p.shape)
    adamw_step(named, AdamWState(), AdamWHyper(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(w.data, 2.0 - 0.1 * 0.5 * 2.0)
    np.testing.assert_array_equal(b.data, 2.0)
    np.testing.assert_array_equal(table.data, 2.0)
    assert no_weight_decay("x.relative_position_bias_table", table)
    assert not no_weight_decay("fc.weight", w)


def test_adamw_frozen_and_nan():
    params, p = _param([1.0])
    p.requires_grad = False
    p.grad = np.ones(1)
    state = adamw_step(params, AdamWState(), AdamWHyper(lr=0.1))
    assert p.data[0] == 1.0 and "w" not in state.m
    params, p = _param([1.0], name="layer.w")
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingError, match="layer.w"):
        adamw_step(params, AdamWState(), AdamWHyper())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=8))
def test_adamw_first_step_is_sign_descent(grads):
    g = np.array(grads)
    params, p = _param(np.zeros_like(g))
    p.grad = g.copy()
    adamw_step(params, AdamWState(), AdamWHyper(lr=1e-2, betas=(0.9, 0.9), weight_decay=0.0))
    np.testing.assert_array_equal(np.sign(p.data), -np.sign(g))
    np.testing.assert_allclose(np.abs(p.data), 1e-2, rtol=1e-4)


# -- schedules ---------------------------------------------------------------
def test_image_schedule_values():
    s = get_train_config("full_image").schedule_spec()
    assert lr_at(s, 0) == pytest.approx(5e-7, rel=1e-12)
    assert lr_at(s, 20) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(s, 299) == pytest.approx(5e-4, rel=1e-12)
    lrs = [lr_at(s, e) for e in range(21)]
    assert all(a < b for a, b in zip(lrs, lrs[1:]))


def test_video_schedule_values():
    cfg = get_train_config("full_video")
    sched = cfg.group_schedules()
    assert sched["backbone"].base_lr == pytest.approx(3e-5) and sched["head"].base_lr == pytest.approx(3e-4)
    head = sched["head"]
    assert lr_at(head, 3) == pytest.approx(3e-4, rel=1e-12)
    assert lr_at(head, 29) < 0.01 * 3e-4
    assert lr_at(head, 2.999) == pytest.approx(lr_at(head, 3), rel=1e-3)


def test_schedule_errors_and_step_decay():
    s = ScheduleSpec(base_lr=1.0, warmup_lr=0.0, warmup_epochs=2, total_epochs=10, decay_epochs=3, decay_rate=0.5)
    assert [lr_at(s, e) for e in (2, 4, 5, 8)] == [1.0, 1.0, 0.5, 0.25]
    for e in (-1, 10):
        with pytest.raises(ParameterError):
            lr_at(s, e)
    with pytest.raises(ConfigError):
        ScheduleSpec(kind="linear")
    with pytest.raises(ConfigError):
        ScheduleSpec(warmup_epochs=10, total_epochs=10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10), st.integers(1, 40), st.floats(1e-6, 1e-2), st.sampled_from(["warmup_hold", "warmup_cosine"]))
def test_schedule_bounded_by_base(warm, extra, base, kind):
    s = ScheduleSpec(kind=kind, base_lr=base, warmup_lr=base / 100, warmup_epochs=warm, total_epochs=warm + extra)
    for e in np.linspace(0, warm + extra - 1e-9, 25):
        assert 0 <= lr_at(s, e) <= base * (1 + 1e-12)


# -- configs --------------------------------------------------------------
def test_train_config_validation_and_round_trip():
    cfg = get_train_config("full_video")
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(backbone_lr=1e-4)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        get_train_config("huge")
    img = get_train_config("full_image")
    assert (img.base_lr, img.warmup_lr, img.warmup_epochs, img.freeze_stages, img.batch_size) == (5e-4, 5e-7, 20, 3, 128)


# -- training loops ----------------------------------------------------------
@pytest.fixture(scope="module")
def small_ds():
    rng = np.random.default_rng(3)
    imgs = rng.integers(0, 256, size=(24, 64, 64, 3), dtype=np.uint8)
    labels = np.array([1, 0, 0, 0] * 6)
    imgs[labels == 1, 20:40, 20:40] = (240, 210, 60)
    return FrameDataset(imgs, labels)


def _run(ds, **kw):
    cfg = get_train_config("tiny_image", epochs=2, batch_size=8, warmup_epochs=1, **kw)
    return train_image(cfg, ds, ds)


def test_training_is_deterministic(small_ds):
    a, b = _run(small_ds), _run(small_ds)
    assert a.log == b.log
    assert f"{a.log[0]['loss']:.6f}" == f"{b.log[0]['loss']:.6f}"
    for (n, x), (m, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        np.testing.assert_array_equal(x, y)


def test_training_log_and_weights(small_ds, tmp_path):
    cfg = get_train_config("tiny_image", epochs=2, batch_size=8, warmup_epochs=1)
    res = train_image(cfg, small_ds, small_ds, out_dir=tmp_path)
    assert res.weights == LossWeights(0.25, 0.75)
    rows = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert rows == res.log
    assert {r["split"] for r in rows} == {"train", "val"}
    assert set(rows[0]) == {"epoch", "split", "loss", "acc", "prec", "rec", "f1", "lr"}
    assert res.best_f1 == max(r["f1"] for r in rows if r["split"] == "val")
    override = _run(small_ds, weights=(0.5, 0.5))
    assert override.weights == LossWeights(0.5, 0.5)


def test_resume_continues_to_same_result(small_ds, tmp_path):
    cfg = get_train_config("tiny_image", epochs=3, batch_size=8, warmup_epochs=1)
    full = train_image(cfg, small_ds, small_ds)
    with pytest.raises(_Stop):
        train_image(cfg, small_ds, small_ds, out_dir=tmp_path, on_epoch=_stop_after(1))
    resumed = train_image(cfg, small_ds, small_ds, out_dir=tmp_path, resume=True)
    assert resumed.log == full.log
    for (n, x), (m, y) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        np.testing.assert_array_equal(x, y)


class _Stop(Exception):
    pass


def _stop_after(epoch):
    # simulates an interrupted run once the given epoch is on disk
    def cb(row):
        if row["split"] == "val" and row["epoch"] == epoch:
            raise _Stop

    return cb


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(small_ds):
    cfg = get_train_config("tiny_image", epochs=1, batch_size=8, warmup_epochs=0, base_lr=1e30, warmup_lr=1e28)
    with pytest.raises(TrainingError):
        train_image(cfg, small_ds, small_ds)


def test_zero_backbone_lr_keeps_backbone_bits():
    rng = np.random.default_rng(0)
    videos = {"v": rng.integers(0, 256, size=(64, 64, 64, 3), dtype=np.uint8)}
    clips = [ClipSample("v", tuple(range(s, s + 16, 2)), lab, s) for s, lab in ((0, 0), (16, 1), (32, 0), (48, 1))]
    ds = ClipDataset(videos, clips)
    model = VidMacsSwin("tiny", seed=0)
    before = model.state_dict()
    cfg = get_train_config("tiny_video", epochs=1, batch_size=2, warmup_epochs=0, backbone_lr=0.0, head_lr=1e-3,
                           augment=False)
    train_video(cfg, ds, model=model)
    after = model.state_dict()
    for n in before:
        if n.startswith("head."):
            assert not np.array_equal(before[n], after[n]), n
        else:
            np.testing.assert_array_equal(before[n], after[n])
