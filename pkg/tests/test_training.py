import json
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from oracles import central_difference, ref_joint_loss, ref_prompt_loss, rel_error
from prompt_adapter import autodiff as ad
from prompt_adapter.cache import AdapterHyperparams, build_cache
from prompt_adapter.data import EpisodeSpec, sample_few_shot, zero_shot_prompt
from prompt_adapter.encoder import PromptContext, array_checksum, build_classifier_weights, random_prompt
from prompt_adapter.errors import EmptySplit, EmptyTaskList, IncompatibleEncoder, NotLearnable, ValidationError
from prompt_adapter.optim import CACHE_ADAMW, PROMPT_SGD, cosine_lr
from prompt_adapter.rng import substream
from prompt_adapter.training import (
    TaskData,
    epoch_batches,
    joint_loss,
    multitask_pretrain_prompt,
    prompt_loss,
    train_cache_keys,
    train_joint,
    train_prompt,
    train_separate,
)


@pytest.fixture
def episode(tiny_world):
    ds, enc = tiny_world
    x, y, _ = sample_few_shot(ds, EpisodeSpec(4, 0))
    return ds, enc, x, y


def _loss_at(enc, vectors, classes, x, y, scale):
    return float(prompt_loss(enc, ad.constant(vectors), classes, x, y, scale).value)


def test_epoch_batches_cover_every_row_once():
    batches = epoch_batches(10, 3, seed=1, epoch=2)
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    assert_array_equal(np.concatenate(batches), np.concatenate(epoch_batches(10, 3, 1, 2)))


def test_zero_epochs_is_a_no_op(episode):
    ds, enc, x, y = episode
    p = zero_shot_prompt(ds, enc).copy(learnable=True)
    before = p.checksum()
    report = train_prompt(enc, p, (x, y), ds.classes, replace(PROMPT_SGD, epochs=0))
    assert p.checksum() == before and report.epochs == [] and report.step_lrs == []


def test_prompt_training_lowers_the_loss(episode):
    ds, enc, x, y = episode
    p = zero_shot_prompt(ds, enc).copy(learnable=True)
    start = _loss_at(enc, p.vectors, ds.classes, x, y, 100.0)
    train_prompt(enc, p, (x, y), ds.classes, replace(PROMPT_SGD, epochs=50), logit_scale=100.0)
    assert _loss_at(enc, p.vectors, ds.classes, x, y, 100.0) < start


def test_prompt_training_is_deterministic_and_leaves_encoder_alone(episode):
    ds, enc, x, y = episode
    enc_sum = enc.checksum()
    out = []
    for _ in range(2):
        p = random_prompt(4, enc.config.token_dim, substream(0, "init", "prompt"))
        train_prompt(enc, p, (x, y), ds.classes, replace(PROMPT_SGD, epochs=5), logit_scale=100.0)
        out.append(p.vectors)
    assert_array_equal(out[0], out[1])
    assert enc.checksum() == enc_sum


def test_step_lrs_follow_the_cosine_schedule(episode):
    ds, enc, x, y = episode
    p = zero_shot_prompt(ds, enc).copy(learnable=True)
    opt = replace(PROMPT_SGD, epochs=3, batch_size=5)
    report = train_prompt(enc, p, (x, y), ds.classes, opt)
    total = 3 * int(np.ceil(len(y) / 5))
    assert len(report.step_lrs) == total
    assert_allclose(report.step_lrs, [cosine_lr(opt.lr, t, total) for t in range(total)], atol=1e-12, rtol=0)


def test_tiny_learning_rate_descends(episode):
    # One full-batch step at a tiny rate must lower the loss: a sign check on the gradient.
    ds, enc, x, y = episode
    p = zero_shot_prompt(ds, enc).copy(learnable=True)
    start = _loss_at(enc, p.vectors, ds.classes, x, y, 100.0)
    opt = replace(PROMPT_SGD, lr=1e-6, epochs=1, batch_size=len(y), momentum=0.0, schedule="constant")
    train_prompt(enc, p, (x, y), ds.classes, opt, logit_scale=100.0)
    assert _loss_at(enc, p.vectors, ds.classes, x, y, 100.0) < start


def test_train_report_json(episode):
    ds, enc, x, y = episode
    p = zero_shot_prompt(ds, enc).copy(learnable=True)
    report = train_prompt(enc, p, (x, y), ds.classes, replace(PROMPT_SGD, epochs=2), val=ds.split("val"), config_hash="cafe")
    rec = json.loads(report.to_json())
    assert set(rec) == {"config_hash", "per_epoch", "final_checksums"}
    assert rec["config_hash"] == "cafe"
    assert [e["epoch"] for e in rec["per_epoch"]] == [0, 1]
    assert set(rec["per_epoch"][0]) == {"epoch", "phase", "loss", "val_acc", "lr"}
    assert rec["final_checksums"]["encoder"] == enc.checksum()


def test_best_epoch_is_kept(episode):
    ds, enc, x, y = episode
    xv, yv = ds.split("val")
    p = zero_shot_prompt(ds, enc).copy(learnable=True)
    report = train_prompt(enc, p, (x, y), ds.classes, replace(PROMPT_SGD, epochs=6), (xv, yv), 100.0)
    best = max(e.val_acc for e in report.epochs)
    assert report.epochs[report.best_epoch].val_acc == best
    w = build_classifier_weights(enc, p, ds.classes)
    assert np.mean(np.argmax(xv @ w.T, axis=1) == yv) == best


def test_frozen_parameters_are_rejected(episode):
    ds, enc, x, y = episode
    frozen = zero_shot_prompt(ds, enc)
    with pytest.raises(NotLearnable):
        train_prompt(enc, frozen, (x, y), ds.classes, PROMPT_SGD)
    cache = build_cache(x, y, ds.n_classes)
    with pytest.raises(NotLearnable):
        train_cache_keys(cache, frozen, enc, (x, y), ds.classes, AdapterHyperparams(), CACHE_ADAMW)
    cache.learnable = True
    with pytest.raises(ValidationError):
        train_cache_keys(cache, frozen.copy(learnable=True), enc, (x, y), ds.classes, AdapterHyperparams(), CACHE_ADAMW)
    with pytest.raises(EmptySplit):
        train_prompt(enc, frozen.copy(learnable=True), (np.zeros((0, ds.dim)), np.zeros(0)), ds.classes, PROMPT_SGD)


def test_cache_training_keeps_prompt_and_values(episode):
    ds, enc, x, y = episode
    prompt = zero_shot_prompt(ds, enc)
    cache = build_cache(x, y, ds.n_classes)
    cache.learnable = True
    values, keys0, p_sum = cache.values.copy(), cache.keys.copy(), prompt.checksum()
    train_cache_keys(cache, prompt, enc, (x, y), ds.classes, AdapterHyperparams(1.0, 5.0), replace(CACHE_ADAMW, epochs=3))
    assert_array_equal(cache.values, values)
    assert prompt.checksum() == p_sum
    assert np.max(np.abs(cache.keys - keys0)) > 0
    assert_allclose(np.linalg.norm(cache.keys, axis=1), 1.0, atol=1e-12)


def test_separate_freezes_the_prompt_between_phases(episode):
    ds, enc, x, y = episode
    prompt = zero_shot_prompt(ds, enc).copy(learnable=True)
    cache = build_cache(x, y, ds.n_classes)
    cache.learnable = True
    seen = {}

    def retune(p):
        seen["sum"] = p.checksum()
        seen["learnable"] = p.learnable
        return AdapterHyperparams(1.0, 5.0)

    report = train_separate(
        enc, prompt, cache, (x, y), ds.classes, AdapterHyperparams(),
        replace(PROMPT_SGD, epochs=2), replace(CACHE_ADAMW, epochs=2), retune=retune, prompt_scale=100.0,
    )
    assert seen == {"sum": prompt.checksum(), "learnable": False}
    assert report.final_checksums["prompt"] == prompt.checksum()
    assert [e.phase for e in report.epochs] == ["prompt", "prompt", "cache", "cache"]


def test_joint_step_moves_both(episode):
    ds, enc, x, y = episode
    prompt = zero_shot_prompt(ds, enc).copy(learnable=True)
    cache = build_cache(x, y, ds.n_classes)
    cache.learnable = True
    p0, k0 = prompt.checksum(), array_checksum(cache.keys)
    opt = replace(PROMPT_SGD, epochs=1, batch_size=len(y))
    report = train_joint(enc, prompt, cache, (x, y), ds.classes, AdapterHyperparams(1.0, 5.0), opt)
    assert prompt.checksum() != p0 and array_checksum(cache.keys) != k0
    assert report.final_checksums["encoder"] == enc.checksum()


def test_joint_gradient_passes_finite_differences(small_encoder, small_classes):
    r = np.random.default_rng(8)
    classes = small_classes[:3]
    x = r.normal(size=(6, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.array([0, 1, 2, 0, 1, 2])
    cache = build_cache(x, y, 3)
    pv = r.normal(size=(2, 16))
    hp = AdapterHyperparams(1.3, 3.0)
    enc = small_encoder
    with ad.GradientTape() as tape:
        p, k = tape.watch(pv), tape.watch(cache.keys)
        g_p, g_k = tape.gradient(joint_loss(enc, p, k, cache, classes, x, y, hp, 4.0), [p, k])
    ref = lambda pp, kk: ref_joint_loss(enc, pp, kk, cache.labels, 3, classes, x, y, 1.3, 3.0, 4.0)  # noqa: E731
    assert rel_error(central_difference(lambda pp: ref(pp, cache.keys), pv), g_p) < 1e-5
    assert rel_error(central_difference(lambda kk: ref(pv, kk), cache.keys), g_k) < 1e-5


def test_prompt_loss_matches_reference(small_encoder, small_classes):
    r = np.random.default_rng(2)
    x = r.normal(size=(5, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = r.integers(0, 4, 5)
    pv = r.normal(size=(3, 16))
    got = float(prompt_loss(small_encoder, ad.constant(pv), small_classes, x, y, 7.0).value)
    assert_allclose(got, ref_prompt_loss(small_encoder, pv, small_classes, x, y, 7.0), rtol=1e-12)


def _task(ds, seed=0):
    x, y, _ = sample_few_shot(ds, EpisodeSpec(4, seed))
    return TaskData(x, y, ds.classes)


def test_single_task_multitask_equals_prompt_training(episode):
    ds, enc, x, y = episode
    opt = replace(PROMPT_SGD, epochs=3)
    start = random_prompt(4, enc.config.token_dim, substream(0, "init", "prompt"))
    shared = multitask_pretrain_prompt(enc, start.copy(), [TaskData(x, y, ds.classes)], opt, logit_scale=100.0)
    alone = start.copy()
    train_prompt(enc, alone, (x, y), ds.classes, opt, logit_scale=100.0)
    assert_allclose(shared.vectors, alone.vectors, atol=1e-12, rtol=0)
    assert_array_equal(start.vectors, random_prompt(4, enc.config.token_dim, substream(0, "init", "prompt")).vectors)


def test_identical_tasks_follow_one_trajectory(episode):
    ds, enc, x, y = episode
    opt = replace(PROMPT_SGD, epochs=2)
    start = random_prompt(4, enc.config.token_dim, substream(1, "init", "prompt"))
    t = TaskData(x, y, ds.classes)
    one = multitask_pretrain_prompt(enc, start, [t], opt)
    three = multitask_pretrain_prompt(enc, start, [t, t, t], opt)
    assert_allclose(three.vectors, one.vectors, atol=1e-12, rtol=0)


def test_multitask_errors(episode, small_encoder):
    ds, enc, x, y = episode
    start = random_prompt(4, enc.config.token_dim, substream(0, "init", "prompt"))
    with pytest.raises(EmptyTaskList):
        multitask_pretrain_prompt(enc, start, [], PROMPT_SGD)
    with pytest.raises(IncompatibleEncoder):
        multitask_pretrain_prompt(small_encoder, PromptContext(np.zeros((4, 16))), [TaskData(x, y, ds.classes)], PROMPT_SGD)
    with pytest.raises(ValidationError):
        multitask_pretrain_prompt(enc, start, [TaskData(x, y, ds.classes)], PROMPT_SGD, task_weights=[0.5, 0.5])


def test_sum_reduction_scales_the_batch_loss(small_encoder, small_classes, rng):
    x = rng.normal(size=(5, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.integers(0, 4, 5)
    pv = rng.normal(size=(2, 16))
    mean = float(prompt_loss(small_encoder, ad.constant(pv), small_classes, x, y, 3.0).value)
    total = float(prompt_loss(small_encoder, ad.constant(pv), small_classes, x, y, 3.0, "sum").value)
    assert_allclose(total, 5 * mean, rtol=1e-13)
