import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duq import data, diffcore as dc, loss, model, synth
from duq.diffcore import Tape
from duq.model import ModelConfig


def tiny_tensors(t_enc=4, t_dec=3, n_stations=2, n_obs=3, nwp_width=2, n_targets=2, n_dates=5, seed=0):
    cfg = synth.SynthConfig(
        n_dates=n_dates, n_stations=n_stations, t_enc=t_enc, t_dec=t_dec, n_obs=n_obs,
        nwp_width=nwp_width, n_targets=n_targets, seed=seed,
    )
    rec = synth.generate(cfg)[0]
    spec = data.fit_normalizer(rec)
    return data.build_tensors(data.apply_normalizer(spec, rec), spec, t_enc, t_dec)


def zero_params(config):
    p = model.init_params(config)
    for t in p:
        t.data[...] = 0.0
    return p


def nle_gradcheck(params, E, D, Y):
    """Worst relative error over every parameter entry."""
    def value():
        mean, var = model.forward_tensors(params, E, D)
        return loss.nle(mean, var, model.to_time_major(Y), n_samples=E.shape[0]).item()

    with Tape() as tape:
        mean, var = model.forward_tensors(params, E, D)
        lv = loss.nle(mean, var, model.to_time_major(Y), n_samples=E.shape[0])
    grads = tape.backward(lv)
    worst = {}
    for name, p in params.tensors.items():
        numeric = dc.numerical_gradient(value, p)
        assert dc.gradients_close(grads[p], numeric, 1e-4, 1e-6), name
        worst[name] = dc.max_relative_error(grads[p], numeric)
    return worst


class TestInit:
    def test_same_seed_identical(self):
        cfg = ModelConfig(3, 2, 2, 4, 3, 2, hidden_sizes=(5, 4), seed=11)
        a, b = model.init_params(cfg), model.init_params(cfg)
        for name in a.names():
            assert a[name].data.tobytes() == b[name].data.tobytes()

    def test_gru_weight_shape(self):
        cfg = ModelConfig(9, 29, 3, 28, 37, 10, hidden_sizes=(50,))
        p = model.init_params(cfg)
        assert p["enc0.W"].shape == (9, 150)
        assert p["enc0.U"].shape == (50, 150)
        assert p["dec0.W"].shape == (2 + 2 + 29, 150)
        assert p["head.W"].shape == (50, 6)
        assert p["embed.station"].shape == (10, 2)
        assert p["embed.time"].shape == (37, 2)

    def test_bounded(self):
        p = model.init_params(ModelConfig(9, 29, 3, 28, 37, 10, hidden_sizes=(300, 300), seed=0))
        assert max(np.abs(t.data).max() for t in p) < 1.0
        assert all(np.all(p[n].data == 0) for n in p.names() if n.endswith(".b"))

    def test_parameter_count_is_pure(self):
        cfg = ModelConfig(3, 2, 2, 4, 3, 2, hidden_sizes=(8,))
        assert model.init_params(cfg).n_parameters() == sum(int(np.prod(s)) for s in model.param_shapes(cfg).values())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(3, 2, 2, 4, 3, 2, hidden_sizes=())
        with pytest.raises(ValueError):
            ModelConfig(3, 2, 2, 4, 3, 2, min_variance=0.0)
        with pytest.raises(ValueError):
            ModelConfig(3, 2, 2, 4, 3, 2, embed_dim_time=0)


class TestGRUStep:
    def setup_method(self):
        self.cfg = ModelConfig(3, 2, 2, 4, 3, 2, hidden_sizes=(4,), seed=1)

    def test_zero_params_zero_state(self):
        p = zero_params(self.cfg)
        h = model.gru_step(p, "enc0", np.ones((2, 3)), np.zeros((2, 4)))
        npt.assert_array_equal(h.data, 0.0)

    def test_closed_update_gate_carries_state(self):
        p = model.init_params(self.cfg)
        p["enc0.b"].data[:4] = -50.0  # z ~ 0
        h_prev = np.random.default_rng(0).standard_normal((2, 4))
        h = model.gru_step(p, "enc0", np.ones((2, 3)), h_prev)
        npt.assert_allclose(h.data, h_prev, atol=1e-12)

    def test_matches_reference_cell(self):
        rng = np.random.default_rng(2)
        p = model.init_params(self.cfg)
        for t in p:
            t.data[...] = rng.standard_normal(t.shape)
        x, h = rng.standard_normal((3, 3)), rng.standard_normal((3, 4))
        W, U, b = p["enc0.W"].data, p["enc0.U"].data, p["enc0.b"].data
        sig = lambda v: 1 / (1 + np.exp(-v))
        z = sig(x @ W[:, :4] + h @ U[:, :4] + b[:4])
        r = sig(x @ W[:, 4:8] + h @ U[:, 4:8] + b[4:8])
        cand = np.tanh(x @ W[:, 8:] + (r * h) @ U[:, 8:] + b[8:])
        expected = (1 - z) * h + z * cand
        npt.assert_allclose(model.gru_step(p, "enc0", x, h).data, expected, rtol=1e-12, atol=1e-14)

    def test_three_step_gradcheck(self):
        rng = np.random.default_rng(3)
        p = model.init_params(self.cfg)
        xs = [rng.standard_normal((2, 3)) for _ in range(3)]
        w = rng.standard_normal((2, 4))

        def run():
            h = dc.constant(np.zeros((2, 4)))
            for x in xs:
                h = model.gru_step(p, "enc0", x, h)
            return dc.sum(h * w)

        with Tape() as tape:
            out = run()
        grads = tape.backward(out)
        for name in ("enc0.W", "enc0.U", "enc0.b"):
            numeric = dc.numerical_gradient(lambda: run().item(), p[name])
            assert dc.max_relative_error(grads[p[name]], numeric) < 1e-4


class TestEncodeDecode:
    def test_empty_history_rejected(self):
        p = model.init_params(ModelConfig(3, 2, 2, 4, 3, 2, hidden_sizes=(4,)))
        with pytest.raises(ValueError):
            model.encode(p, np.zeros((1, 0, 3)))

    def test_zero_params_context_is_zero(self):
        p = zero_params(ModelConfig(3, 2, 2, 4, 3, 2, hidden_sizes=(4, 3)))
        ctx = model.encode(p, np.random.default_rng(0).standard_normal((5, 4, 3)))
        assert [c.shape for c in ctx] == [(5, 4), (5, 3)]
        assert all(np.all(c.data == 0) for c in ctx)

    def test_station_permutation_permutes_context(self):
        t = tiny_tensors()
        p = model.init_params(ModelConfig.for_tensors(t, hidden_sizes=(6,), seed=4))
        E = t.encoder_inputs[0].transpose(1, 0, 2)  # (S, T_E, N1)
        a = model.encode(p, E)[0].data
        b = model.encode(p, E[::-1])[0].data
        npt.assert_array_equal(a[::-1], b)

    def test_zero_params_output(self):
        t = tiny_tensors()
        p = zero_params(ModelConfig.for_tensors(t, hidden_sizes=(4,)))
        dist = model.forward(p, t.sample(0, 0))
        npt.assert_array_equal(dist.mean, 0.0)
        npt.assert_allclose(dist.variance, np.log(2.0) + 1e-6, rtol=1e-15)
        assert dist.variance[0, 0] == pytest.approx(0.693148, abs=1e-6)

    def test_variance_floor(self):
        t = tiny_tensors()
        cfg = ModelConfig.for_tensors(t, hidden_sizes=(4,), min_variance=1e-6)
        p = zero_params(cfg)
        p["head.b"].data[cfg.n_targets :] = -40.0
        dist = model.forward(p, t.sample(1, 1))
        npt.assert_allclose(dist.variance, 1e-6, rtol=1e-9)

    def test_reported_output_shape(self):
        cfg = ModelConfig(9, 29, 3, 28, 37, 10, hidden_sizes=(4,))
        p = model.init_params(cfg)
        rng = np.random.default_rng(0)
        D = np.concatenate([np.arange(37)[:, None], np.full((37, 1), 3.0), rng.random((37, 29))], axis=1)
        sample = data.TrainingSample(rng.random((28, 9)), D, np.zeros((37, 3)), 0, 3)
        dist = model.forward(p, sample)
        assert dist.mean.shape == (37, 3) and dist.variance.shape == (37, 3)

    def test_out_of_range_station_rejected(self):
        t = tiny_tensors()
        p = model.init_params(ModelConfig.for_tensors(t, hidden_sizes=(4,)))
        s = t.sample(0, 0)
        bad = s.decoder.copy()
        bad[:, 1] = 7
        with pytest.raises(IndexError, match="7"):
            model.forward_batch(p, s.encoder, bad)


class TestForward:
    def setup_method(self):
        self.t = tiny_tensors()
        self.p = model.init_params(ModelConfig.for_tensors(self.t, hidden_sizes=(6, 5), seed=2))

    def test_pure(self):
        a = model.forward(self.p, self.t.sample(1, 0))
        b = model.forward(self.p, self.t.sample(1, 0))
        assert a.mean.tobytes() == b.mean.tobytes()
        assert a.variance.tobytes() == b.variance.tobytes()

    def test_targets_never_read(self):
        s = self.t.sample(2, 1)
        scrambled = data.TrainingSample(s.encoder, s.decoder, np.full_like(s.target, np.nan), 2, 1)
        npt.assert_array_equal(model.forward(self.p, s).mean, model.forward(self.p, scrambled).mean)

    def test_nwp_mask_leaves_context(self):
        masked = data.mask_channel(self.t, "nwp")
        a = model.encode(self.p, self.t.sample(0, 0).encoder)
        b = model.encode(self.p, masked.sample(0, 0).encoder)
        for x, y in zip(a, b):
            npt.assert_array_equal(x.data, y.data)
        assert not np.array_equal(model.forward(self.p, self.t.sample(0, 0)).mean, model.forward(self.p, masked.sample(0, 0)).mean)

    def test_batch_equals_individual(self):
        i, s = self.t.all_pairs()
        E, D, _ = self.t.gather(i, s)
        batch = model.forward_batch(self.p, E, D)
        for k in range(len(i)):
            one = model.forward(self.p, self.t.sample(i[k], s[k]))
            npt.assert_allclose(batch.mean[k], one.mean, rtol=0, atol=1e-12)
            npt.assert_allclose(batch.variance[k], one.variance, rtol=0, atol=1e-12)

    def test_predict_dataset_layout(self):
        dist = model.predict_dataset(self.p, self.t, chunk=3)
        assert dist.mean.shape == (5, 3, 2, 2)
        npt.assert_allclose(dist.mean[3, :, 1], model.forward(self.p, self.t.sample(3, 1)).mean, atol=1e-12)

    def test_full_gradcheck(self):
        t = tiny_tensors(t_enc=4, t_dec=3, n_stations=2, n_obs=3, nwp_width=2)
        p = model.init_params(ModelConfig.for_tensors(t, hidden_sizes=(8,), seed=5))
        E, D, Y = t.gather([0, 1, 3], [0, 1, 1])
        worst = nle_gradcheck(p, E, D, Y)
        assert max(worst.values()) < 1e-4

    def test_checkpoint_round_trip(self, tmp_path):
        model.save_params(tmp_path / "m.duqp", self.p, extra={"mask": "none"})
        back = model.load_params(tmp_path / "m.duqp")
        assert back.config == self.p.config
        for name in self.p.names():
            assert back[name].data.tobytes() == self.p[name].data.tobytes()


def test_variance_floor_over_random_draws():
    cfg = ModelConfig(2, 1, 2, 2, 2, 1, hidden_sizes=(2,), min_variance=1e-6)
    rng = np.random.default_rng(0)
    D = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    worst = np.inf
    p = model.init_params(cfg)
    for _ in range(10_000):
        for t in p:
            t.data[...] = rng.standard_normal(t.shape) * 10.0
        D[:, 2] = rng.standard_normal(2)
        dist = model.forward_batch(p, rng.standard_normal((1, 2, 2)), D)
        worst = min(worst, dist.variance.min())
    assert worst >= 1e-6


@settings(max_examples=15, deadline=None)
@given(
    n_obs=st.integers(1, 4),
    n_nwp=st.integers(0, 3),
    n_targets=st.integers(1, 3),
    t_enc=st.integers(1, 4),
    t_dec=st.integers(1, 4),
    n_stations=st.integers(1, 3),
    hidden=st.lists(st.integers(1, 5), min_size=1, max_size=3),
    batch=st.integers(1, 3),
)
def test_shape_contract(n_obs, n_nwp, n_targets, t_enc, t_dec, n_stations, hidden, batch):
    cfg = ModelConfig(n_obs, n_nwp, n_targets, t_enc, t_dec, n_stations, hidden_sizes=tuple(hidden))
    p = model.init_params(cfg)
    rng = np.random.default_rng(0)
    ids = np.stack(
        [np.broadcast_to(np.arange(t_dec), (batch, t_dec)), rng.integers(0, n_stations, (batch, 1)).repeat(t_dec, 1)],
        axis=2,
    ).astype(float)
    D = np.concatenate([ids, rng.random((batch, t_dec, n_nwp))], axis=2)
    dist = model.forward_batch(p, rng.random((batch, t_enc, n_obs)), D)
    assert dist.mean.shape == (batch, t_dec, n_targets)
    assert dist.variance.shape == (batch, t_dec, n_targets)
    assert dist.variance.min() >= cfg.min_variance
