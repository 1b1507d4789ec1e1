import math

import numpy as np
import pytest
import torch

from darthkit.adapt import (
    AdaptConfig,
    AdaptState,
    PretrainConfig,
    adapt_run,
    adapt_step,
    clip_gradients,
    pretrain_source,
    sfod_baseline,
)
from darthkit.model import DetectConfig, ModelConfig, init_weights
from darthkit.mot_io import LabeledVideo
from darthkit.synthbench import TARGET_STYLE, SOURCE_STYLE, SceneSpec, generate

SMALL = ModelConfig(encoder_channels=(8, 8, 8), rpn_channels=8, roi_hidden=16, embed_hidden=16, embed_dim=8,
                    pre_nms_topk=50, post_nms_topk=16)
# Detect everything so the contrastive branch has material to work with.
LOOSE = DetectConfig(score_thr=0.0, nms_iou=0.5)


@pytest.fixture(scope="module")
def target():
    video, _ = generate(SceneSpec(num_objects=2, num_frames=3, seed=4), TARGET_STYLE, "t")
    return [video]


@pytest.fixture(scope="module")
def source_set():
    video, gt = generate(SceneSpec(num_objects=2, num_frames=4, seed=5), SOURCE_STYLE, "s")
    return [LabeledVideo(video, gt)]


@pytest.fixture(scope="module")
def w0():
    return init_weights(SMALL, seed=0, dtype=torch.float64)


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(tau=1.5)
    with pytest.raises(ValueError):
        AdaptConfig(gamma_conf=-0.1)


def test_clip_gradients_bound():
    rng = np.random.default_rng(0)
    for _ in range(50):
        grads = [torch.tensor(rng.normal(size=s) * rng.uniform(0, 100)) for s in [(3, 4), (7,), (2, 2, 2)]]
        cap = float(rng.uniform(0.01, 50))
        assert clip_gradients(grads, cap) <= cap + 1e-6
        total = math.sqrt(sum(float((g**2).sum()) for g in grads))
        assert total <= cap + 1e-6


def test_pcl_path_produces_losses(w0, target):
    cfg = AdaptConfig(gamma_conf=0.0, detect=LOOSE, epochs=1)
    state = AdaptState.start(w0, cfg)
    records = []
    for t, frame in enumerate(target[0].frames):
        state, rec = adapt_step(state, frame, (0, t))
        records.append(rec)
    assert any(r.embed > 0 for r in records)
    assert all(math.isfinite(r.total) for r in records)
    assert all(not p.requires_grad for p in state.teacher.params.values())


def test_no_surviving_detections(w0, target):
    cfg = AdaptConfig(gamma_conf=1.0, detect=LOOSE)
    _, rec = adapt_step(AdaptState.start(w0, cfg), target[0].frames[0], 0)
    assert rec.embed == 0.0 and rec.aux == 0.0
    assert rec.dc_rpn >= 0.0 and rec.dc_roi >= 0.0


def test_tau_one_keeps_teacher(w0, target):
    cfg = AdaptConfig(tau=1.0, gamma_conf=0.0, detect=LOOSE)
    state = AdaptState.start(w0, cfg)
    before = {k: v.numpy().tobytes() for k, v in state.teacher.params.items()}
    state, _ = adapt_step(state, target[0].frames[0], 0)
    assert {k: v.numpy().tobytes() for k, v in state.teacher.params.items()} == before
    assert not state.student.equal(w0)


@pytest.mark.parametrize("tau", [0.0, 0.98, 0.998, 1.0])
def test_ema_geometric_law_with_frozen_student(tau, w0, target):
    theta = w0
    xi0 = init_weights(SMALL, seed=1, dtype=torch.float64)
    cfg = AdaptConfig(tau=tau, lr=0.0)
    state = AdaptState(theta.clone(), xi0.clone(), cfg, lr=0.0)
    for n in range(1, 4):
        state, _ = adapt_step(state, target[0].frames[n % 3], n)
        assert state.student.equal(theta)
        for k in theta.params:
            got = (state.teacher[k] - theta[k]).abs()
            want = tau**n * (xi0[k] - theta[k]).abs()
            assert torch.allclose(got, want, rtol=1e-9, atol=1e-12)


def test_gradient_clip_contract(w0, target):
    cfg = AdaptConfig(gamma_conf=0.0, detect=LOOSE, grad_clip_norm=0.05, epochs=1)
    state = AdaptState.start(w0, cfg)
    for t, frame in enumerate(target[0].frames):
        state, _ = adapt_step(state, frame, t)
        assert state.last_grad_norm <= 0.05 + 1e-6


def test_zero_epochs_returns_source(w0, target):
    assert adapt_run(w0, target, AdaptConfig(epochs=0)).equal(w0)


def test_run_deterministic_and_finite(w0, target):
    cfg = AdaptConfig(gamma_conf=0.0, detect=LOOSE, epochs=1)
    trace_a, trace_b = [], []
    a = adapt_run(w0, target, cfg, trace=trace_a)
    b = adapt_run(w0, target, cfg, trace=trace_b)
    assert a.equal(b)
    assert [r.to_json() for r in trace_a] == [r.to_json() for r in trace_b]
    assert len(trace_a) == 3 and all(math.isfinite(r.total) for r in trace_a)


def test_labels_never_reach_adaptation(w0, source_set):
    with pytest.raises(TypeError):
        adapt_run(w0, source_set, AdaptConfig(epochs=1))


def test_sfod_without_pseudo_labels_is_identity(w0, target):
    assert sfod_baseline(w0, target, 1.0, AdaptConfig(epochs=1)).equal(w0)


def test_sfod_deterministic_and_keeps_embedding(w0, target):
    cfg = AdaptConfig(epochs=1, detect=LOOSE)
    a = sfod_baseline(w0, target, 0.0, cfg)
    b = sfod_baseline(w0, target, 0.0, cfg)
    assert a.equal(b)
    assert not a.equal(w0)
    for k in w0.params:
        if k.startswith("embed."):
            assert torch.equal(a[k], w0[k])


def test_pretrain_zero_iterations_returns_init(source_set, w0):
    assert pretrain_source(source_set, PretrainConfig(iterations=0, model=SMALL), init=w0).equal(w0)


def test_pretrain_deterministic(source_set):
    cfg = PretrainConfig(iterations=3, model=SMALL)
    a, b = pretrain_source(source_set, cfg), pretrain_source(source_set, cfg)
    assert a.equal(b)
    assert not a.equal(init_weights(SMALL, seed=0))
