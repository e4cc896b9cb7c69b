import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otprompt.errors import DegenerateError, ShapeError
from otprompt.numerics import make_rng
from otprompt.representation import (FeatureSequence, GroundTruthSegment, PseudoEncoder, TemporalConvStack,
                                     build_pyramid, encode_all, encode_prompts, encode_prompts_backward,
                                     init_context_bank, pyramid_backward, temporal_conv, temporal_conv_backward)
from oracles import central_diff, max_pool_windows, rel_err, sliding_conv


# ---- data types


def test_segment_and_sequence_validation():
    with pytest.raises(ValueError):
        GroundTruthSegment(3.0, 3.0, 0)
    with pytest.raises(ValueError):
        FeatureSequence("v", np.zeros((4, 2)), 1.0, [GroundTruthSegment(1.0, 5.0, 0)])
    with pytest.raises(ShapeError):
        FeatureSequence("v", np.zeros((0, 2)))
    seq = FeatureSequence("v", np.zeros((4, 2)), 0.5, [GroundTruthSegment(0.0, 2.0, 1)])
    assert seq.num_clips == 4 and seq.duration == 2.0


# ---- temporal conv


def test_identity_kernel_passes_input_through():
    x = make_rng(0).normal(size=(6, 4))
    assert np.array_equal(temporal_conv(x, TemporalConvStack.identity(4, 2)), x)


def test_single_frame_sees_zero_neighbours():
    rng = make_rng(1)
    stack = TemporalConvStack.init(3, 1, rng)
    x = rng.normal(size=(1, 3))
    w, b = stack.weights[0].value, stack.biases[0].value
    assert np.allclose(temporal_conv(x, stack), x @ w[1] + b, atol=1e-15)


def test_conv_matches_sliding_window():
    rng = make_rng(2)
    stack = TemporalConvStack.init(4, 2, rng)
    for s in stack.biases:
        s.value = rng.normal(size=4)
    x = rng.normal(size=(9, 4))
    h = sliding_conv(x, stack.weights[0].value, stack.biases[0].value)
    expect = sliding_conv(np.maximum(h, 0), stack.weights[1].value, stack.biases[1].value)
    assert np.max(np.abs(temporal_conv(x, stack) - expect)) < 1e-10


def test_conv_is_local():
    rng = make_rng(3)
    stack = TemporalConvStack.init(2, 1, rng)
    x = rng.normal(size=(10, 2))
    y = x.copy()
    y[7] += 1.0
    diff = np.abs(temporal_conv(x, stack) - temporal_conv(y, stack)).sum(1)
    assert set(np.nonzero(diff)[0]) <= {6, 7, 8}


def test_conv_init_scale():
    stack = TemporalConvStack.init(32, 2, make_rng(4))
    w = np.concatenate([s.value.ravel() for s in stack.weights])
    assert abs(w.std() - np.sqrt(2 / 96)) < 0.01
    assert all(not b.value.any() for b in stack.biases)


def test_conv_backward_finite_difference():
    rng = make_rng(5)
    stack = TemporalConvStack.init(3, 2, rng)
    x = rng.normal(size=(5, 3))
    probe = rng.normal(size=(5, 3))

    def f():
        return float((temporal_conv(x, stack) * probe).sum())

    cache = []
    temporal_conv(x, stack, cache)
    gx = temporal_conv_backward(probe, stack, cache)
    assert rel_err(gx, central_diff(f, x)) < 1e-7
    for slot in stack.slots():
        assert rel_err(slot.grad, central_diff(f, slot.value)) < 1e-7


# ---- pyramid


def test_pyramid_lengths():
    assert build_pyramid(np.zeros((8, 1)), 3).lengths == [8, 4, 2]
    assert build_pyramid(np.zeros((7, 1)), 3).lengths == [7, 4, 2]
    assert build_pyramid(np.zeros((7, 1)), 3).strides == [1, 2, 4]
    pooled = build_pyramid(np.array([[1.0], [3.0], [2.0], [5.0]]), 2).levels[1]
    assert np.array_equal(pooled, [[3.0], [5.0]])


def test_pyramid_clamps_with_warning():
    with pytest.warns(UserWarning, match="clamped"):
        pyr = build_pyramid(np.zeros((3, 2)), 6)
    assert pyr.lengths == [3, 2, 1]


@pytest.mark.filterwarnings("ignore:pyramid clamped")
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)),
              elements=st.floats(-100, 100, allow_nan=False)), st.integers(1, 5))
def test_pyramid_levels_are_window_maxima(x, L):
    pyr = build_pyramid(x, L)
    for lo, hi in zip(pyr.levels, pyr.levels[1:]):
        assert np.array_equal(hi, max_pool_windows(lo))


@pytest.mark.filterwarnings("ignore:pyramid clamped")
@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 16), st.integers(1, 3)),
              elements=st.floats(-10, 10, allow_nan=False)), st.floats(0.1, 10))
def test_pyramid_scales_with_input(x, k):
    a, b = build_pyramid(x, 4), build_pyramid(k * x, 4)
    for la, lb in zip(a.levels, b.levels):
        assert np.allclose(k * la, lb, rtol=1e-12, atol=1e-12)


def test_pyramid_backward_routes_to_argmax():
    rng = make_rng(6)
    x = rng.normal(size=(7, 2))
    grads = [rng.normal(size=s) for s in [(7, 2), (4, 2), (2, 2)]]

    def f():
        return float(sum((lv * g).sum() for lv, g in zip(build_pyramid(x, 3).levels, grads)))

    got = pyramid_backward(build_pyramid(x, 3), grads)
    assert rel_err(got, central_diff(f, x)) < 1e-8


# ---- prompts


def small_encoder(C=3, N=2, n_ctx=4, d_ctx=5, D=6, seed=0):
    bank = init_context_bank(C, N, n_ctx, d_ctx, make_rng(seed))
    enc = PseudoEncoder.from_seed(seed + 100, C, n_ctx, d_ctx, D)
    return bank, enc


def test_encoded_rows_are_unit():
    bank, enc = small_encoder()
    g = encode_prompts(bank, enc, 1)
    assert g.shape == (2, 6)
    assert np.all(np.abs(np.linalg.norm(g, axis=1) - 1) < 1e-12)
    assert encode_all(bank, enc).shape == (3, 2, 6)


def test_class_token_distinguishes_classes():
    bank, enc = small_encoder()
    bank.slots[1].value = bank.slots[0].value.copy()
    assert not np.allclose(encode_prompts(bank, enc, 0), encode_prompts(bank, enc, 1))


def test_encoder_is_frozen_and_reproducible():
    a = PseudoEncoder.from_seed(9, 3, 4, 5, 6)
    b = PseudoEncoder.from_seed(9, 3, 4, 5, 6)
    assert np.array_equal(a.projection, b.projection) and np.array_equal(a.class_tokens, b.class_tokens)
    with pytest.raises(ValueError):
        a.projection[0, 0] = 1.0


def test_encoding_identical_across_processes():
    code = ("import numpy as np; from otprompt.numerics import make_rng; "
            "from otprompt.representation import *; "
            "b = init_context_bank(2, 3, 4, 5, make_rng(1)); e = PseudoEncoder.from_seed(2, 2, 4, 5, 6); "
            "print(encode_all(b, e).tobytes().hex())")
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1
    bank = init_context_bank(2, 3, 4, 5, make_rng(1))
    enc = PseudoEncoder.from_seed(2, 2, 4, 5, 6)
    assert outs.pop().strip() == encode_all(bank, enc).tobytes().hex()


def test_degenerate_prompt_raises():
    bank, enc = small_encoder()
    enc = PseudoEncoder(np.zeros_like(enc.class_tokens), enc.projection, enc.seed)
    bank.slots[0].value = np.zeros_like(bank.slots[0].value)
    with pytest.raises(DegenerateError):
        encode_prompts(bank, enc, 0)


def test_context_init_statistics():
    bank = init_context_bank(10, 10, 20, 50, make_rng(7))
    x = np.concatenate([s.value.ravel() for s in bank.slots])
    assert x.size == 100_000
    assert abs(x.mean()) < 0.001
    assert abs(x.std() - 0.02) < 0.001
    assert all(not s.grad.any() for s in bank.slots)
    again = init_context_bank(10, 10, 20, 50, make_rng(7))
    assert all(np.array_equal(a.value, b.value) for a, b in zip(bank.slots, again.slots))


def test_single_prompt_bank():
    bank, enc = small_encoder(N=1)
    assert bank.num_prompts == 1
    assert encode_prompts(bank, enc, 2).shape == (1, 6)


def test_encode_backward_finite_difference():
    bank, enc = small_encoder()
    probe = make_rng(8).normal(size=(2, 6))

    def f():
        return float((encode_prompts(bank, enc, 1) * probe).sum())

    encode_prompts_backward(bank, enc, 1, probe)
    assert rel_err(bank.slots[1].grad, central_diff(f, bank.slots[1].value)) < 1e-6
    assert not bank.slots[0].grad.any()
