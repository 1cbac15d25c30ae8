import json
import threading

import numpy as np
import pytest

from cosalkit.backend import BackendDescriptor, NoiseSchedule, ToyBackend, backend_for, q_sample
from cosalkit.backend.toy import VOCABULARY
from cosalkit.concept import inject_concept
from cosalkit.errors import ShapeError, ValidationError


class TestSchedule:
    def test_scaled_linear_is_nonincreasing_and_in_range(self):
        s = NoiseSchedule.scaled_linear()
        assert s.total_steps == 1000
        assert np.all(np.diff(s.alpha_bar) <= 0)
        assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))

    def test_scaled_linear_endpoints(self):
        s = NoiseSchedule.scaled_linear()
        assert s(0) == pytest.approx(1 - 0.00085)
        # product of (1 - beta) over the whole sqrt-linear ramp
        betas = np.linspace(0.00085 ** 0.5, 0.012 ** 0.5, 1000) ** 2
        assert s(999) == pytest.approx(np.prod(1 - betas), rel=1e-12)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, 0.5], [0.5, 0.0], []])
    def test_rejects_invalid_tables(self, bad):
        with pytest.raises(ValidationError):
            NoiseSchedule(np.array(bad))

    @pytest.mark.parametrize("t", [-1, 1000, 2.5])
    def test_timestep_range(self, t):
        with pytest.raises(ValidationError):
            NoiseSchedule.scaled_linear().check_timestep(t)


class TestAddNoise:
    def test_alpha_bar_one_returns_clean_latent(self, rng):
        z0, eps = rng.normal(size=(4, 8, 8)), rng.normal(size=(4, 8, 8))
        np.testing.assert_array_equal(q_sample(z0, eps, 1.0), z0)

    def test_alpha_bar_zero_returns_noise(self, rng):
        z0, eps = rng.normal(size=(4, 8, 8)), rng.normal(size=(4, 8, 8))
        np.testing.assert_array_equal(q_sample(z0, eps, 0.0), eps)

    def test_quarter_signal_on_ones(self):
        z = q_sample(np.ones((4, 8, 8)), np.ones((4, 8, 8)), 0.25)
        # sqrt(0.25) + sqrt(0.75)
        np.testing.assert_allclose(z, 0.5 + 0.75 ** 0.5)
        assert float(z[0, 0, 0]) == pytest.approx(1.3660254, abs=1e-7)

    def test_superposition(self, toy, rng):
        a0, b0, ea, eb = (rng.normal(size=toy.latent_shape) for _ in range(4))
        for t in (0, 123, 999):
            lhs = toy.add_noise(2 * a0 - b0, t, 2 * ea - eb)
            rhs = 2 * toy.add_noise(a0, t, ea) - toy.add_noise(b0, t, eb)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_triangle_bound(self, toy, rng):
        for t in rng.integers(0, 1000, size=25):
            z0, eps = rng.normal(size=toy.latent_shape), rng.normal(size=toy.latent_shape)
            ab = toy.schedule(t)
            bound = np.sqrt(ab) * np.linalg.norm(z0) + np.sqrt(1 - ab) * np.linalg.norm(eps)
            assert np.linalg.norm(toy.add_noise(z0, t, eps)) <= bound + 1e-12

    def test_records_noise(self, toy, rng):
        eps = rng.normal(size=toy.latent_shape)
        z = toy.add_noise(np.zeros(toy.latent_shape), 10, eps)
        np.testing.assert_array_equal(z.noise, eps)
        assert (z * 2).noise is None

    def test_errors(self, toy):
        z = np.zeros(toy.latent_shape)
        with pytest.raises(ValidationError):
            toy.add_noise(z, 1000, z)
        with pytest.raises(ShapeError):
            toy.add_noise(z, 5, np.zeros((4, 8, 7)))


class TestAutoencoder:
    def test_zero_image_gives_zero_latent(self, toy):
        z = toy.encode_image(np.zeros((64, 64, 3)))
        assert z.shape == toy.latent_shape
        assert not z.any()

    def test_zero_latent_decodes_to_zero_image(self, toy):
        assert not toy.decode_latent(np.zeros(toy.latent_shape)).any()

    def test_reconstruction_of_block_constant_image(self, toy, block_image):
        rec = toy.decode_latent(toy.encode_image(block_image), size=(64, 64))
        assert np.linalg.norm(rec - block_image) / np.linalg.norm(block_image) < 0.05

    def test_decode_clamps(self, toy, rng):
        img = toy.decode_latent(rng.normal(scale=10, size=toy.latent_shape))
        assert img.min() >= 0 and img.max() <= 1

    def test_shape_and_value_errors(self, toy):
        with pytest.raises(ShapeError):
            toy.encode_image(np.zeros((60, 64, 3)))
        with pytest.raises(ShapeError):
            toy.encode_image(np.zeros((64, 64)))
        bad = np.zeros((64, 64, 3))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            toy.encode_image(bad)
        with pytest.raises(ShapeError):
            toy.decode_latent(np.zeros((4, 4, 4)))


class TestText:
    def test_placeholder_position(self, toy):
        text = toy.encode_prompt("a photo of S*")
        assert len(text) == 4
        assert text.placeholder_index == 3

    def test_empty_prompt(self, toy):
        with pytest.raises(ValidationError):
            toy.encode_prompt("")
        with pytest.raises(ValidationError):
            toy.encode_prompt("   ")

    def test_unknown_token(self, toy):
        with pytest.raises(ValidationError):
            toy.encode_prompt("a photo of zebra")

    def test_deterministic(self, toy):
        a, b = toy.encode_prompt("a photo of S*"), toy.encode_prompt("a photo of S*")
        np.testing.assert_array_equal(a.rows, b.rows)
        assert a.token_ids == b.token_ids

    def test_token_rows_are_distinct_and_read_only(self, toy):
        rows = np.stack([toy.token_embedding(t) for t in VOCABULARY])
        assert len({r.tobytes() for r in rows}) == len(VOCABULARY)
        cat = toy.token_embedding("cat")
        cat[:] = 0
        assert toy.token_embedding("cat").any()

    def test_out_of_vocabulary(self, toy):
        with pytest.raises(ValidationError):
            toy.token_embedding("zebra")


class TestPredictNoise:
    def _setup(self, toy, rng, t=321):
        z0 = toy.encode_image(rng.random((64, 64, 3)))
        eps = rng.standard_normal(toy.latent_shape)
        return toy.add_noise(z0, t, eps), eps, t

    def test_exact_at_target(self, toy, rng):
        z_t, eps, t = self._setup(toy, rng)
        text = inject_concept(toy.encode_prompt("a photo of S*"), toy.target)
        np.testing.assert_array_equal(toy.predict_noise(z_t, t, text), eps)

    def test_residual_norm(self, toy, rng):
        z_t, eps, t = self._setup(toy, rng)
        delta = rng.normal(scale=0.1, size=16)
        text = inject_concept(toy.encode_prompt("a photo of S*"), toy.target + delta)
        residual = toy.predict_noise(z_t, t, text) - eps
        assert np.linalg.norm(residual) == pytest.approx(np.linalg.norm(toy.response @ delta), rel=1e-12)

    def test_gradient_matches_finite_differences(self, toy, rng):
        z_t, eps, t = self._setup(toy, rng)
        base = toy.encode_prompt("a photo of S*")
        e = toy.target + rng.normal(scale=0.1, size=16)

        def f(vec):
            r = toy.predict_noise(z_t, t, inject_concept(base, vec)) - eps
            return float(np.sum(r ** 2))

        r = toy.predict_noise(z_t, t, inject_concept(base, e)) - eps
        grad = toy.placeholder_grad(z_t, t, inject_concept(base, e), 2 * r)
        h = 1e-5
        fd = np.array([(f(e + h * u) - f(e - h * u)) / (2 * h) for u in np.eye(16)])
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4

    def test_requires_recorded_noise(self, toy):
        text = toy.encode_prompt("a photo of S*")
        with pytest.raises(ValidationError):
            toy.predict_noise(np.zeros(toy.latent_shape), 5, text)

    def test_response_is_full_rank(self, toy):
        assert np.linalg.matrix_rank(toy.response) == toy.descriptor.d_text

    def test_concurrent_calls_agree(self, toy, rng):
        z_t, eps, t = self._setup(toy, rng)
        text = inject_concept(toy.encode_prompt("a photo of S*"), toy.token_embedding("dog"))
        expected = toy.predict_noise(z_t, t, text)
        results = [None] * 8

        def call(i):
            results[i] = toy.predict_noise(z_t, t, text)

        threads = [threading.Thread(target=call, args=(i,)) for i in range(8)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for r in results:
            np.testing.assert_array_equal(r, expected)


class TestDescriptor:
    def test_json_round_trip(self, toy):
        d = toy.descriptor
        again = BackendDescriptor.from_dict(json.loads(json.dumps(d.to_dict())))
        assert again.to_dict() == d.to_dict()
        assert set(d.to_dict()) == {"kind", "model_id", "latent_shape", "d_text", "total_steps"}

    def test_backend_for_rebuilds_toy(self):
        b = ToyBackend(seed=3)
        again = backend_for(b.descriptor)
        np.testing.assert_array_equal(again.target, b.target)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            BackendDescriptor("vae", "x", (4, 8, 8), 16, 1000)
