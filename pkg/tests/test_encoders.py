"""Encoder forward/backward checks, including the finite-difference oracle."""

import math

import numpy as np
import pytest

from anchorft.encoders import (
    DEFAULT_LOG_TAU,
    DualEncoderParams,
    EncoderParams,
    encode,
    encode_batch,
    encoder_backward,
    encoder_backward_batch,
    init_params,
    param_fingerprint,
    zero_grads,
)
from anchorft.numerics import gaussian_stream, l2_normalize


def tiny_params(seed=0, img_dim=5, txt_dim=6, hidden=7, embed=4):
    return init_params(seed, (img_dim, txt_dim), hidden, embed)


class TestInitParams:
    def test_deterministic(self):
        a = tiny_params(3)
        b = tiny_params(3)
        assert a.image.w1.tobytes() == b.image.w1.tobytes()
        assert a.text.w2.tobytes() == b.text.w2.tobytes()

    def test_seeds_differ(self):
        assert not np.array_equal(tiny_params(0).image.w1, tiny_params(1).image.w1)

    def test_biases_zero_and_log_tau_default(self):
        p = tiny_params()
        assert not p.image.b1.any()
        assert not p.text.b2.any()
        assert p.log_tau == DEFAULT_LOG_TAU
        assert abs(p.tau - 0.07) <= 1e-15

    def test_weight_scale_tracks_fan_in(self):
        # 1/sqrt(fan_in) scaling: empirical std of a wide layer is close to it.
        p = init_params(0, (400, 400), 200, 8)
        assert abs(p.image.w1.std() - 1 / math.sqrt(400)) < 0.01
        assert abs(p.image.w2.std() - 1 / math.sqrt(200)) < 0.01

    def test_embed_dim_floor(self):
        with pytest.raises(ValueError):
            init_params(0, (4, 4), 4, 1)


class TestEncodeForward:
    def test_unit_norm(self):
        p = tiny_params()
        stream = gaussian_stream(5)
        for _ in range(20):
            e = encode(p, "image", stream.normals(5))
            assert abs(np.linalg.norm(e) - 1.0) <= 1e-12

    def test_constant_tower(self):
        # With w2 = 0 the pre-normalization output is b2 for every input.
        p = tiny_params()
        p.image.w2[:] = 0.0
        p.image.b2[:] = [3.0, 0.0, 4.0, 0.0]
        e = encode(p, "image", np.ones(5))
        assert np.allclose(e, [0.6, 0.0, 0.8, 0.0], atol=1e-15)

    def test_one_hidden_unit_by_hand(self):
        # Single hidden unit, x = 0.5: u = (tanh 0.5, tanh 0.5 + 1), normalized.
        tower = EncoderParams(
            w1=[[1.0]], b1=[0.0], w2=[[1.0], [1.0]], b2=[0.0, 1.0]
        )
        p = DualEncoderParams(tower, EncoderParams([[1.0]], [0.0], [[1.0], [1.0]], [0.0, 0.0]))
        t = math.tanh(0.5)
        expected = l2_normalize([t, t + 1.0])
        e = encode(p, "image", [0.5])
        assert np.max(np.abs(e - expected)) <= 1e-15

    def test_output_scale_invariance(self):
        # Scaling (w2, b2) jointly rescales u and cancels in the normalization.
        p = tiny_params(2)
        x = gaussian_stream(0).normals(5)
        base = encode(p, "image", x)
        p.image.w2 *= 3.7
        p.image.b2 *= 3.7
        assert np.max(np.abs(encode(p, "image", x) - base)) <= 1e-12

    def test_batch_matches_single(self):
        # Different BLAS kernels may reorder the dot sums, so agreement is to
        # rounding, not bitwise.
        p = tiny_params(4)
        xs = gaussian_stream(1).normal_matrix(6, 5)
        batch, _ = encode_batch(p, "image", xs)
        for i, row in enumerate(xs):
            assert np.max(np.abs(batch[i] - encode(p, "image", row))) <= 1e-14

    def test_modalities_have_separate_towers(self):
        p = tiny_params(6, img_dim=5, txt_dim=5)
        x = gaussian_stream(2).normals(5)
        assert not np.array_equal(encode(p, "image", x), encode(p, "text", x))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            encode(tiny_params(), "image", np.ones(9))

    def test_unknown_modality(self):
        with pytest.raises(ValueError):
            encode(tiny_params(), "audio", np.ones(5))


class TestEncoderBackward:
    def test_zero_grad_in_zero_out(self):
        p = tiny_params()
        g = encoder_backward(p, "image", np.ones(5), np.zeros(4))
        assert not g.w1.any() and not g.b1.any() and not g.w2.any() and not g.b2.any()

    def test_grad_parallel_to_embedding_vanishes(self):
        # A gradient along e is annihilated by (I - e e^T): unit outputs
        # cannot grow along themselves.
        p = tiny_params(8)
        x = gaussian_stream(3).normals(5)
        e = encode(p, "image", x)
        g = encoder_backward(p, "image", x, 2.5 * e)
        for _, arr in g.leaves():
            assert np.max(np.abs(arr)) <= 1e-12

    def test_batch_backward_sums_rows(self):
        p = tiny_params(9)
        xs = gaussian_stream(4).normal_matrix(3, 5)
        de = gaussian_stream(5).normal_matrix(3, 4)
        _, cache = encode_batch(p, "image", xs)
        batch_grads = encoder_backward_batch(p, "image", cache, de)
        acc = zero_grads(p)
        for row, grad_row in zip(xs, de):
            acc.add_tower("image", encoder_backward(p, "image", row, grad_row))
        for (_, a), (_, b) in zip(batch_grads.leaves(), acc.image.leaves()):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_finite_difference_oracle(self):
        # Central differences of J = g_e . e(x) against the analytic backward,
        # element by element, across 20 seeds.
        eps = 1e-5
        for seed in range(20):
            p = tiny_params(seed)
            stream = gaussian_stream(1000 + seed)
            x = stream.normals(5)
            ge = stream.normals(4)
            analytic = encoder_backward(p, "image", x, ge)

            def objective() -> float:
                return float(np.dot(ge, encode(p, "image", x)))

            for name, arr in p.image.leaves():
                a_grad = getattr(analytic, name)
                flat = arr.reshape(-1)
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + eps
                    hi = objective()
                    flat[idx] = orig - eps
                    lo = objective()
                    flat[idx] = orig
                    numeric = (hi - lo) / (2 * eps)
                    a = a_grad.reshape(-1)[idx]
                    if abs(a) > 1e-8:
                        rel = abs(a - numeric) / max(abs(a), abs(numeric))
                        assert rel <= 1e-4, f"seed {seed} {name}[{idx}]: {rel:.2e}"


class TestParamFingerprint:
    def test_stable_and_sensitive(self):
        p = tiny_params(1)
        q = tiny_params(1)
        assert param_fingerprint(p) == param_fingerprint(q)
        q.text.b2[0] += 1e-12
        assert param_fingerprint(p) != param_fingerprint(q)

    def test_log_tau_included(self):
        p = tiny_params(1)
        q = tiny_params(1)
        q.log_tau += 1e-9
        assert param_fingerprint(p) != param_fingerprint(q)

    def test_copy_preserves_fingerprint(self):
        p = tiny_params(2)
        assert param_fingerprint(p.copy()) == param_fingerprint(p)
