import math
import subprocess
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mbtransfer.core import (Classifier, OptimizerState, count_parameters, cross_entropy, entropy,
                             finite_difference_gradcheck, forward, optimizer_step, softmax, torch_generator)
from mbtransfer.errors import DivergenceError, InvalidInputError, ShapeError
from helpers import FD_EPS, three_teacher_loss, irm_total_loss, gradcheck_instances


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]


def test_softmax_ln3():
    np.testing.assert_allclose(softmax([0.0, math.log(3)]).numpy(), [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    p = softmax([1000.0, 1000.0, 1000.0]).numpy()
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)


@pytest.mark.parametrize("bad", [[0.0, float("nan")], [float("inf"), 0.0]])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        softmax(bad)


logit_vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50))


@settings(max_examples=200, deadline=None)
@given(z=logit_vectors, shift=st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(z, shift):
    p = softmax(z).numpy()
    assert abs(p.sum() - 1) <= 1e-9
    assert np.all(p > 0)
    np.testing.assert_allclose(softmax(z + shift).numpy(), p, atol=1e-9)


# ---------------------------------------------------------------- cross-entropy

def test_cross_entropy_near_identity():
    assert cross_entropy([1.0, 0.0, 0.0], [30.0, 0.0, 0.0]).item() <= 1e-6


def test_cross_entropy_uniform():
    assert cross_entropy([0.5, 0.5], [0.0, 0.0]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_equals_entropy_at_matching_logits():
    # oracle: direct evaluation of -sum t log t
    t = [0.25, 0.75]
    oracle = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    assert oracle == pytest.approx(0.562335, abs=1e-6)
    assert cross_entropy(t, [0.0, math.log(3)]).item() == pytest.approx(oracle, abs=1e-12)


def test_cross_entropy_rejects_invalid_target():
    with pytest.raises(InvalidInputError):
        cross_entropy([0.5, 0.6], [0.0, 0.0])


def test_cross_entropy_batch_is_mean_over_samples():
    t = torch.tensor([[1.0, 0.0], [0.5, 0.5]], dtype=torch.float64)
    z = torch.tensor([[2.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
    per = [cross_entropy(t[i], z[i]).item() for i in range(2)]
    assert cross_entropy(t, z).item() == pytest.approx(sum(per) / 2, abs=1e-15)


@st.composite
def dist_and_logits(draw):
    m = draw(st.integers(2, 8))
    w = draw(arrays(np.float64, m, elements=st.floats(0.0, 1.0)))
    if w.sum() == 0:
        w[0] = 1.0
    z = draw(arrays(np.float64, m, elements=st.floats(-30, 30)))
    return w / w.sum(), z


@settings(max_examples=200, deadline=None)
@given(dz=dist_and_logits())
def test_gibbs_inequality(dz):
    t, z = dz
    assert cross_entropy(t, z).item() >= entropy(t).item() - 1e-9


@settings(max_examples=100, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 8), elements=st.floats(-20, 20)))
def test_gibbs_equality_when_target_is_softmax(z):
    t = softmax(z)
    assert cross_entropy(t, z).item() == pytest.approx(entropy(t).item(), abs=1e-9)


# ---------------------------------------------------------------- classifier / forward

def test_forward_shape_for_several_sizes():
    model = Classifier(5, 7, generator=torch_generator(0))
    for h, w in [(1, 1), (8, 8), (16, 16), (13, 21)]:
        assert forward(model, torch.zeros(3, 5, h, w)).shape == (3, 7)


def test_parameter_count_is_function_of_descriptor():
    blocks = ((16, 3, 2), (32, 3, 2), (64, 3, 2))
    model = Classifier(6, 4, blocks)
    assert sum(p.numel() for p in model.parameters()) == count_parameters(blocks, 6, 4)


def test_zero_head_gives_uniform_softmax():
    model = Classifier(3, 4, generator=torch_generator(1), head_init="zeros")
    logits = forward(model, torch.rand(5, 3, 16, 16))
    np.testing.assert_array_equal(softmax(logits).numpy(), np.full((5, 4), 0.25, dtype=np.float32))


def test_identical_inputs_give_identical_rows():
    model = Classifier(3, 4, generator=torch_generator(2))
    x = torch.rand(1, 3, 16, 16).repeat(6, 1, 1, 1)
    out = forward(model, x)
    assert torch.equal(out, out[:1].expand_as(out))


def test_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        forward(Classifier(3, 4), torch.zeros(2, 6, 16, 16))


_FORWARD_SCRIPT = """
import hashlib, torch
from mbtransfer.core import Classifier, forward, torch_generator
torch.set_num_threads(1)
m = Classifier(6, 4, generator=torch_generator(123))
x = torch.rand(8, 6, 16, 16, generator=torch_generator(7))
print(hashlib.sha256(forward(m, x).numpy().tobytes()).hexdigest())
"""


def test_forward_bit_identical_across_processes():
    runs = [subprocess.run([sys.executable, "-c", _FORWARD_SCRIPT], capture_output=True, text=True, check=True)
            .stdout.strip() for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0]) == 64


# ---------------------------------------------------------------- optimizer

def test_zero_learning_rate_leaves_params_bit_identical():
    p = torch.randn(10, generator=torch_generator(0))
    before = p.clone()
    for kind in ("sgd", "adam"):
        optimizer_step(OptimizerState(lr=0.0, kind=kind, momentum=0.9 if kind == "sgd" else 0.0),
                       [p], [torch.randn(10)])
        assert torch.equal(p, before)


def test_unit_step_on_gradient_equal_to_params_zeroes_them():
    p = torch.tensor([1.5, -2.0, 3.0])
    optimizer_step(OptimizerState(lr=1.0), [p], [p.clone()])
    assert torch.equal(p, torch.zeros(3))


def test_quadratic_bowl_matches_closed_form():
    # f(p) = p^2 / 2, grad = p; recurrence p <- (1 - lr) p has closed form 0.9^100
    p = torch.tensor([1.0], dtype=torch.float64)
    state = OptimizerState(lr=0.1)
    for _ in range(100):
        optimizer_step(state, [p], [p.clone()])
    assert p.item() == pytest.approx(0.9 ** 100, rel=1e-12)
    assert p.item() == pytest.approx(2.656e-5, rel=1e-3)


def test_inverse_time_decay():
    state = OptimizerState(lr=1.0, decay=0.5)
    p = torch.tensor([0.0], dtype=torch.float64)
    for _ in range(3):
        optimizer_step(state, [p], [torch.tensor([1.0], dtype=torch.float64)])
    # steps use lr 1, 1/1.5, 1/2
    assert p.item() == pytest.approx(-(1 + 1 / 1.5 + 1 / 2.0), abs=1e-15)


def test_non_finite_gradient_aborts():
    p = torch.zeros(3)
    with pytest.raises(DivergenceError, match="param 0"):
        optimizer_step(OptimizerState(lr=0.1), [p], [torch.tensor([0.0, float("nan"), 1.0])])
    assert torch.equal(p, torch.zeros(3))


def test_grad_shape_mismatch():
    with pytest.raises(ShapeError):
        optimizer_step(OptimizerState(), [torch.zeros(3)], [torch.zeros(4)])


# ---------------------------------------------------------------- gradient check

def test_gradcheck_linear_loss_is_exact():
    g = torch_generator(3)
    w = torch.randn(20, dtype=torch.float64, generator=g)
    p = torch.randn(20, dtype=torch.float64, generator=g, requires_grad=True)
    assert finite_difference_gradcheck(lambda: (w * p).sum(), [p], eps=1e-5) <= 1e-9


@pytest.mark.parametrize("kind", ["distill", "supervised", "three-teacher", "irm-total"])
def test_trainer_losses_pass_gradcheck(kind):
    for model, x, targets, aux in gradcheck_instances(5):
        params = list(model.parameters())
        if kind == "distill":
            fn = lambda: cross_entropy(targets[0], model(x))  # noqa: E731
        elif kind == "supervised":
            hard = torch.nn.functional.one_hot(targets[0].argmax(1), targets[0].shape[1]).to(torch.float64)
            fn = lambda: cross_entropy(hard, model(x))  # noqa: E731
        elif kind == "three-teacher":
            fn = lambda: three_teacher_loss(model, x, targets)  # noqa: E731
        else:
            fn = lambda: irm_total_loss(model, x, targets, aux)  # noqa: E731
        assert finite_difference_gradcheck(fn, params, eps=FD_EPS) < 1e-4
