import hashlib

import numpy as np
import pytest
from scipy import stats

from zsqdet import tensor as T
from zsqdet.config import SynthesisConfig
from zsqdet.detector import build_model, detect_loss, iou
from zsqdet.persistence import serialize
from zsqdet.synthesis import (BOX_MAX, BOX_MIN, SynthesisError, SynthesisState, adaptive_label_step,
                              adaptive_label_update, baseline_labels, bns_alignment_loss,
                              generate_calibration_set, regularizer_loss, sample_initial_label,
                              synthesis_objective, synthesize_images, tile_labels, tv_loss)
from zsqdet.tensor import Tensor

from oracles import box, random_label_case, reference_label_update

SMALL = dict(resolution=32, iterations=6, label_iterations=4, batch_size=4)


# -- regularizers -----------------------------------------------------------

def test_tv_hand_value():
    x = Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))
    # vertical differences are 0; horizontal differences are 1 in both rows
    assert tv_loss(x).item() == pytest.approx(1.0)


def test_regularizer_trivial_cases():
    assert tv_loss(Tensor(np.full((2, 3, 5, 5), 0.7))).item() == 0.0
    assert regularizer_loss(Tensor(np.zeros((2, 3, 4, 4))), 1.0, 1.0).item() == 0.0
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 4, 4))
    got = regularizer_loss(Tensor(x), 0.3, 0.01).item()
    assert got == pytest.approx(0.3 * tv_loss(Tensor(x)).item() + 0.01 * (x ** 2).sum() / 2)


# -- BNS alignment ----------------------------------------------------------

def _matched_model(x):
    """A model whose running statistics equal the batch statistics of ``x``."""
    model = build_model(channels=(4, 8, 8), num_classes=2, image_size=32, seed=1)
    model.bn_momentum = 1.0
    with T.no_grad():
        model.set_mode("train")(Tensor(x))
    model.bn_momentum = T.BN_MOMENTUM
    return model.set_mode("eval")


def test_bns_zero_when_running_stats_equal_batch_stats():
    x = np.random.default_rng(1).uniform(0, 1, (6, 3, 32, 32))
    assert bns_alignment_loss(_matched_model(x), Tensor(x)).item() < 1e-9


def test_bns_closed_form_for_shifted_last_layer():
    # shifting the last BN's buffers leaves every BN input unchanged, so the loss is
    # exactly the norm of the mean shift plus the norm of the variance shift
    x = np.random.default_rng(2).uniform(0, 1, (6, 3, 32, 32))
    model = _matched_model(x)
    d_mu, d_var = np.array([0.3, -0.4, 0, 0, 0, 0, 0, 0]), np.full(8, 0.25)
    model.bns[-1].running_mean += d_mu
    model.bns[-1].running_var += d_var
    assert bns_alignment_loss(model, Tensor(x)).item() == pytest.approx(0.5 + np.sqrt(8 * 0.0625),
                                                                        abs=1e-9)


def test_bns_leaves_buffers_and_mode_alone():
    x = np.random.default_rng(3).uniform(0, 1, (4, 3, 32, 32))
    model = build_model(channels=(4, 8, 8), num_classes=2, image_size=32).set_mode("eval")
    before = [b.copy() for b in model.named_buffers().values()]
    bns_alignment_loss(model, Tensor(x))
    assert model.mode == "eval"
    for a, b in zip(before, model.named_buffers().values()):
        np.testing.assert_array_equal(a, b)


def test_bns_requires_batchnorm():
    model = build_model(channels=(4, 8, 8), num_classes=2, image_size=32)
    model.bns = []
    with pytest.raises(SynthesisError):
        bns_alignment_loss(model, Tensor(np.zeros((1, 3, 32, 32))))


def test_bns_real_images_far_below_noise(tiny_teacher, tiny_data):
    real = bns_alignment_loss(tiny_teacher, Tensor(tiny_data.split("train").images())).item()
    noise = np.random.default_rng(4).standard_normal((256, 3, 64, 64))
    assert real * 10 <= bns_alignment_loss(tiny_teacher, Tensor(noise)).item()


# -- objective --------------------------------------------------------------

def _state(n=2, res=32, seed=5):
    rng = np.random.default_rng(seed)
    return SynthesisState(Tensor(rng.standard_normal((n, 3, res, res)), requires_grad=True),
                          [sample_initial_label(2, rng, i) for i in range(n)])


def test_objective_is_sum_of_components():
    model = build_model(channels=(4, 8, 8), num_classes=2, image_size=32).set_mode("eval")
    cfg = SynthesisConfig(alpha_tv=0.2, **SMALL)
    state = _state()
    loss = synthesis_objective(model, state, cfg)
    x = T.sigmoid(state.latent)
    prior = bns_alignment_loss(model, x).item()
    det = detect_loss(model(x), state.labels).total.item()
    reg = regularizer_loss(x, 0.2, cfg.alpha_l2).item()
    assert loss.total.item() == pytest.approx(cfg.alpha_prior * prior + cfg.alpha_detect * det + reg,
                                              rel=1e-12)


def test_objective_without_detection_is_task_agnostic():
    model = build_model(channels=(4, 8, 8), num_classes=2, image_size=32).set_mode("eval")
    cfg = SynthesisConfig(alpha_detect=0.0, **SMALL)
    state = _state()
    loss = synthesis_objective(model, state, cfg)
    x = T.sigmoid(state.latent)
    expected = cfg.alpha_prior * bns_alignment_loss(model, x).item() + \
        regularizer_loss(x, 0.0, cfg.alpha_l2).item()
    assert loss.detect.item() == 0.0
    assert loss.total.item() == pytest.approx(expected, rel=1e-12)


# -- labels -----------------------------------------------------------------

def test_initial_label_bounds():
    rng = np.random.default_rng(6)
    for _ in range(2000):
        lb = sample_initial_label(6, rng)
        assert BOX_MIN <= lb.w <= BOX_MAX and BOX_MIN <= lb.h <= BOX_MAX
        x1, y1, x2, y2 = lb.xyxy()
        assert 0 <= x1 and 0 <= y1 and x2 <= 1 and y2 <= 1
    assert (BOX_MIN, BOX_MAX) == (0.2, 0.8)
    with pytest.raises(ValueError):
        sample_initial_label(0, rng)


def test_initial_label_classes_uniform():
    rng = np.random.default_rng(7)
    counts = np.bincount([sample_initial_label(6, rng).class_id for _ in range(10_000)], minlength=6)
    assert stats.chisquare(counts).pvalue > 0.01


def test_algorithm_hand_cases():
    a = box(0.3, 0.3, 0.2, 0.2, conf=0.9)
    a_near = box(0.31, 0.3, 0.2, 0.2, conf=0.8)
    assert iou(a, a_near) > 0.8
    b = box(0.7, 0.7, 0.2, 0.2, cls=1, conf=0.7)
    assert adaptive_label_update([a], [a_near, b], 0.45) == [a, b]
    # nothing detected: a singleton is kept, a multi-label image shrinks to its best label
    assert adaptive_label_update([a], [], 0.45) == [a]
    c = box(0.6, 0.3, 0.2, 0.2, conf=0.95)
    assert adaptive_label_update([a, b, c], [], 0.45) == [c]
    # exact re-detection is a fixed point
    assert adaptive_label_update([a, b], [a, b], 0.45) == [a, b]


def test_algorithm_matches_reference_on_random_cases():
    rng = np.random.default_rng(8)
    for _ in range(100):
        existing, detected = random_label_case(rng)
        got = adaptive_label_update(existing, detected, 0.45)
        assert got == reference_label_update(existing, detected, 0.45)
        assert len(got) >= 1


def test_label_step_keeps_every_image_labelled():
    model = build_model(channels=(4, 8, 8), num_classes=2, image_size=32).set_mode("eval")
    state = _state(n=3)
    state.labels += [box(0.5, 0.5, 0.3, 0.3, b=1, conf=0.4)]
    new = adaptive_label_step(state, model, 0.5, 0.45)
    assert sorted({lb.batch_index for lb in new}) == [0, 1, 2]
    assert model.mode == "eval"


def test_tile_two_by_two():
    rng = np.random.default_rng(9)
    for _ in range(50):
        lbs = tile_labels(6, rng, 2)
        assert len(lbs) == 4
        cells = {(int(lb.cx * 2), int(lb.cy * 2)) for lb in lbs}
        assert len(cells) == 4
        for lb in lbs:
            c, r = int(lb.cx * 2), int(lb.cy * 2)
            x1, y1, x2, y2 = lb.xyxy()
            assert c / 2 <= x1 and x2 <= (c + 1) / 2 and r / 2 <= y1 and y2 <= (r + 1) / 2


def test_multisample_in_reproduces_histogram():
    hist = {"1": 9, "2": 5, "3": 2, "5": 1}
    labels = baseline_labels("multisample", "in", 17, 6, np.random.default_rng(10), hist)
    got = {}
    for lbs in labels:
        got[str(len(lbs))] = got.get(str(len(lbs)), 0) + 1
    assert got == hist
    with pytest.raises(ValueError):
        baseline_labels("multisample", "in", 4, 6, np.random.default_rng(0), None)


def test_baseline_out_counts():
    rng = np.random.default_rng(11)
    assert all(len(l) == 3 for l in baseline_labels("multisample", "out", 5, 6, rng))
    assert all(len(l) == 4 for l in baseline_labels("tile", "out", 5, 6, rng))
    assert all(len(l) == 1 for l in baseline_labels("gaussian", "out", 5, 6, rng))


# -- full generation --------------------------------------------------------

def _teacher_digest(model):
    return hashlib.sha256(serialize(model)).hexdigest()


def test_generation_is_reproducible_and_read_only(tiny_teacher):
    cfg = SynthesisConfig(**SMALL, seed=3)
    before = _teacher_digest(tiny_teacher)
    a = generate_calibration_set(tiny_teacher, cfg, 6)
    b = generate_calibration_set(tiny_teacher, cfg, 6)
    assert _teacher_digest(tiny_teacher) == before
    assert a.images.shape == (6, 3, 32, 32)
    assert a.images.tobytes() == b.images.tobytes() and a.labels == b.labels
    assert all(len(l) >= 1 for l in a.labels)
    assert all(lb.batch_index == i for i, l in enumerate(a.labels) for lb in l)


@pytest.mark.parametrize("method,mode", [("multisample", "out"), ("tile", "out"), ("gaussian", "out")])
def test_baseline_generation(tiny_teacher, method, mode):
    cfg = SynthesisConfig(**SMALL)
    cs = generate_calibration_set(tiny_teacher, cfg, 5, method, mode)
    assert len(cs) == 5 and all(len(l) >= 1 for l in cs.labels)
    assert 0 <= cs.images.min() and cs.images.max() <= 1


def test_objective_moving_average_does_not_increase(tiny_teacher):
    # default batch size: with only a few images the cutout noise dominates once the lr decays
    cfg = SynthesisConfig(resolution=32, iterations=300)
    rng = np.random.default_rng(12)
    labels = [[sample_initial_label(6, rng, i)] for i in range(cfg.batch_size)]
    res = synthesize_images(tiny_teacher, cfg, labels, rng)
    total = np.array([h["total"] for h in res.history])
    avg = np.convolve(total, np.ones(100) / 100, mode="valid")
    assert np.all(np.diff(avg) <= 0)
    assert res.prior_final < res.prior_initial


def test_nan_aborts_with_diagnostic(tiny_teacher):
    cfg = SynthesisConfig(**SMALL)
    teacher = tiny_teacher.copy()
    teacher.bns[0].running_var[:] = np.nan
    with pytest.raises(SynthesisError, match="diverged"):
        generate_calibration_set(teacher, cfg, 2, "multisample", "out")
