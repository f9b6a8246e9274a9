import numpy as np
import pytest

from rlsol.conv import (
    ConvLayer,
    ConvRlsState,
    ConvSessionConfig,
    ConvSessionEvent,
    FeatureMap,
    SampleSet,
    WeightedSample,
    conv_forward,
    conv_gradient,
    conv_loss,
    conv_update_stage,
    conv_virtual_input,
    im2col,
    init_conv_state,
    output_shape,
    read_feature_map,
    read_weighted_sample,
    roll_kernel,
    run_conv_session,
    unroll_kernel,
    write_feature_map,
    write_weighted_sample,
)
from rlsol.errors import ConfigError, InputError, ProtocolError
from rlsol.optimizers import GdConfig, precond_update_stage
from rlsol.rls import RlsConfig, SampleBlock, init_state


def _direct_conv(fm: FeatureMap, layer: ConvLayer) -> np.ndarray:
    data = fm.data
    if layer.padding:
        data = np.pad(
            data,
            ((0, 0), (layer.padding, layer.padding), (layer.padding, layer.padding)),
        )
    _, kh, kw = layer.kernel.shape
    h_out, w_out = output_shape(fm, layer)
    out = np.zeros((h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            r, c = i * layer.stride, j * layer.stride
            out[i, j] = np.sum(data[:, r : r + kh, c : c + kw] * layer.kernel)
    return out


def _random_sample(rng, layer, c, h, w, gamma=None):
    fm = FeatureMap(rng.standard_normal((c, h, w)))
    shape = output_shape(fm, layer)
    target = rng.standard_normal(shape)
    if gamma is None:
        gamma = rng.uniform(0, 1, shape)
    return WeightedSample(fm, target, gamma)


class TestIm2col:
    def test_unit_kernel(self):
        fm = FeatureMap(np.arange(4.0).reshape(1, 2, 2))
        layer = ConvLayer(np.ones((1, 1, 1)))
        cols = im2col(fm, layer)
        assert cols.shape == (1, 4)
        assert np.array_equal(cols[0], [0.0, 1.0, 2.0, 3.0])

    def test_explicit_patch_enumeration(self):
        fm = FeatureMap(np.arange(9.0).reshape(1, 3, 3))
        layer = ConvLayer(np.ones((1, 2, 2)))
        cols = im2col(fm, layer)
        assert cols.shape == (4, 4)
        # output position (i, j) -> column i*2+j; rows in (row, col) order
        for i in range(2):
            for j in range(2):
                patch = fm.data[0, i : i + 2, j : j + 2].reshape(-1)
                assert np.array_equal(cols[:, i * 2 + j], patch)

    def test_zero_input(self):
        fm = FeatureMap(np.zeros((2, 4, 4)))
        layer = ConvLayer(np.ones((2, 3, 3)))
        assert np.all(im2col(fm, layer) == 0)

    def test_kernel_too_large(self):
        fm = FeatureMap(np.zeros((1, 2, 2)))
        with pytest.raises(ConfigError):
            im2col(fm, ConvLayer(np.ones((1, 5, 5))))


class TestConvForward:
    def test_identity_unit_kernel(self):
        fm = FeatureMap(np.arange(6.0).reshape(1, 2, 3))
        layer = ConvLayer(np.ones((1, 1, 1)))
        assert np.array_equal(conv_forward(fm, layer), fm.data[0])

    def test_zero_kernel(self):
        rng = np.random.default_rng(0)
        fm = FeatureMap(rng.standard_normal((3, 5, 5)))
        layer = ConvLayer(np.zeros((3, 3, 3)))
        assert np.all(conv_forward(fm, layer) == 0)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            c = int(rng.integers(1, 5))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            h = int(rng.integers(kh, kh + 5))
            w = int(rng.integers(kw, kw + 5))
            fm = FeatureMap(rng.standard_normal((c, h, w)))
            layer = ConvLayer(rng.standard_normal((c, kh, kw)), stride, padding)
            assert np.max(np.abs(conv_forward(fm, layer) - _direct_conv(fm, layer))) <= 1e-10


class TestKernelLayout:
    def test_unroll_roll_round_trip(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal(2 * 3 * 3)
        assert np.array_equal(unroll_kernel(roll_kernel(v, (2, 3, 3))), v)

    def test_row_order_matches_im2col(self):
        # a kernel that selects one (channel, row, col) position picks the
        # matching im2col row
        rng = np.random.default_rng(3)
        fm = FeatureMap(rng.standard_normal((2, 4, 4)))
        kernel = np.zeros((2, 2, 2))
        kernel[1, 0, 1] = 1.0
        layer = ConvLayer(kernel)
        idx = np.argmax(unroll_kernel(kernel))
        assert np.allclose(conv_forward(fm, layer).reshape(-1), im2col(fm, layer)[idx])


class TestConvLoss:
    def test_fully_masked(self):
        rng = np.random.default_rng(4)
        layer = ConvLayer(rng.standard_normal((1, 2, 2)))
        sample = _random_sample(rng, layer, 1, 4, 4, gamma=np.zeros((3, 3)))
        sset = SampleSet(4, [sample])
        assert conv_loss(sset, layer) == 0.0

    def test_perfect_fit(self):
        rng = np.random.default_rng(5)
        layer = ConvLayer(rng.standard_normal((2, 2, 2)))
        fm = FeatureMap(rng.standard_normal((2, 4, 4)))
        target = conv_forward(fm, layer)
        sset = SampleSet(2, [WeightedSample(fm, target, np.ones_like(target))])
        assert conv_loss(sset, layer) <= 1e-20

    def test_matches_spatial_evaluation(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            layer = ConvLayer(rng.standard_normal((2, 3, 3)), padding=1)
            samples = [_random_sample(rng, layer, 2, 5, 5) for _ in range(3)]
            sset = SampleSet(5, samples)
            lam = 0.3
            ref = 0.5 * lam * np.sum(layer.kernel**2)
            for sample in samples:
                resid = sample.target - _direct_conv(sample.features, layer)
                ref += np.sum(sample.gamma * resid**2)
            assert conv_loss(sset, layer, lam) == pytest.approx(ref, abs=1e-10)

    def test_per_sample_weights_scale_gamma(self):
        rng = np.random.default_rng(7)
        layer = ConvLayer(rng.standard_normal((1, 2, 2)))
        sample = _random_sample(rng, layer, 1, 4, 4)
        single = SampleSet(2, [sample])
        weighted = SampleSet(2, [sample], weights=[3.0])
        assert conv_loss(weighted, layer) == pytest.approx(3 * conv_loss(single, layer))


class TestConvGradient:
    def test_zero_residual(self):
        rng = np.random.default_rng(8)
        layer = ConvLayer(rng.standard_normal((2, 2, 2)))
        fm = FeatureMap(rng.standard_normal((2, 4, 4)))
        target = conv_forward(fm, layer)
        sset = SampleSet(2, [WeightedSample(fm, target, np.ones_like(target))])
        assert np.max(np.abs(conv_gradient(sset, layer))) <= 1e-12

    def test_decay_only(self):
        rng = np.random.default_rng(9)
        layer = ConvLayer(rng.standard_normal((1, 2, 2)))
        sample = _random_sample(rng, layer, 1, 3, 3, gamma=np.zeros((2, 2)))
        sset = SampleSet(1, [sample])
        assert np.allclose(conv_gradient(sset, layer, 0.7), 0.7 * layer.kernel)

    def test_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            layer = ConvLayer(rng.standard_normal((4, 3, 3)), padding=1)
            samples = [_random_sample(rng, layer, 4, 5, 5) for _ in range(2)]
            sset = SampleSet(3, samples)
            lam = 0.2
            grad = conv_gradient(sset, layer, lam)
            step = 1e-6
            fd = np.zeros_like(grad)
            for idx in np.ndindex(layer.kernel.shape):
                saved = layer.kernel[idx]
                layer.kernel[idx] = saved + step
                up = conv_loss(sset, layer, lam)
                layer.kernel[idx] = saved - step
                down = conv_loss(sset, layer, lam)
                layer.kernel[idx] = saved
                fd[idx] = (up - down) / (2 * step)
            assert np.max(np.abs(grad - fd)) <= 1e-6 * (1 + np.max(np.abs(fd)))


class TestVirtualInput:
    def test_singleton_unit_gamma(self):
        rng = np.random.default_rng(11)
        layer = ConvLayer(rng.standard_normal((2, 2, 2)))
        fm = FeatureMap(rng.standard_normal((2, 2, 2)))
        target = np.ones((1, 1))
        sset = SampleSet(1, [WeightedSample(fm, target, np.ones((1, 1)))])
        x_bar = conv_virtual_input(sset, layer)
        assert np.allclose(x_bar, im2col(fm, layer)[:, 0])

    def test_fully_masked_zero(self):
        rng = np.random.default_rng(12)
        layer = ConvLayer(rng.standard_normal((1, 2, 2)))
        sample = _random_sample(rng, layer, 1, 4, 4, gamma=np.zeros((3, 3)))
        sset = SampleSet(1, [sample])
        assert np.all(conv_virtual_input(sset, layer) == 0)

    def test_gamma_doubling_scales_sqrt2(self):
        rng = np.random.default_rng(13)
        layer = ConvLayer(rng.standard_normal((2, 2, 2)))
        samples = [_random_sample(rng, layer, 2, 4, 4) for _ in range(2)]
        doubled = [
            WeightedSample(s.features, s.target, 2.0 * s.gamma) for s in samples
        ]
        a = conv_virtual_input(SampleSet(2, samples), layer)
        b = conv_virtual_input(SampleSet(2, doubled), layer)
        assert np.allclose(b, np.sqrt(2) * a, atol=1e-12)

    def test_weighted_residual_bound(self):
        # scaled-mean residual never exceeds the column-wise residual sum
        rng = np.random.default_rng(14)
        for _ in range(50):
            layer = ConvLayer(rng.standard_normal((2, 2, 2)))
            samples = [_random_sample(rng, layer, 2, 4, 4) for _ in range(3)]
            sset = SampleSet(3, samples)
            w_vec = unroll_kernel(layer.kernel)
            x_bar = conv_virtual_input(sset, layer)
            n_cols = len(sset) * 9
            y_bar = 0.0
            for sample in samples:
                y_bar += np.sqrt(sample.gamma.reshape(-1)) @ sample.target.reshape(-1)
            y_bar /= np.sqrt(n_cols)
            lhs = (y_bar - w_vec @ x_bar) ** 2
            rhs = conv_loss(sset, layer)
            assert lhs <= rhs + 1e-12


class TestUpdateStage:
    def test_scalar_reduction(self):
        # 1x1 kernel on 1x1 single-channel maps: the conv stage is the
        # generic preconditioned stage with the gradient's factor 2 folded
        # into the learning rate
        rng = np.random.default_rng(15)
        eta = 0.1
        layer = ConvLayer(rng.standard_normal((1, 1, 1)))
        w = layer.kernel.reshape(1, 1).copy()
        conv_state = init_conv_state(layer, delta=0.5, beta=0.9)
        plain_state = init_state(RlsConfig(1, 1, beta=0.9, delta=0.5))
        for _ in range(5):
            x = float(rng.standard_normal())
            y = float(rng.standard_normal())
            sample = WeightedSample(
                FeatureMap(np.full((1, 1, 1), x)), np.full((1, 1), y), np.ones((1, 1))
            )
            sset = SampleSet(1, [sample])
            layer, conv_state = conv_update_stage(
                layer, sset, conv_state, GdConfig(eta / 2.0, iterations=3)
            )
            block = SampleBlock(x=np.array([[x]]), y=np.array([[y]]))
            w, plain_state = precond_update_stage(
                w, block, plain_state, GdConfig(eta, iterations=3)
            )
            assert np.allclose(layer.kernel.reshape(1, 1), w, atol=1e-12)

    def test_default_delta_preset(self):
        layer = ConvLayer(np.zeros((2, 3, 3)))
        state = init_conv_state(layer)
        assert state.state.config.delta == 0.1

    def test_zero_gradient_decay_only(self):
        rng = np.random.default_rng(16)
        layer = ConvLayer(rng.standard_normal((2, 2, 2)))
        fm = FeatureMap(rng.standard_normal((2, 4, 4)))
        target = conv_forward(fm, layer)
        sset = SampleSet(1, [WeightedSample(fm, target, np.ones_like(target))])
        state = init_conv_state(layer, delta=1.0)
        cfg = GdConfig(0.1, iterations=1, weight_decay=0.4)
        new_layer, new_state = conv_update_stage(layer, sset, state, cfg)
        p = new_state.state.p_mat
        expect = unroll_kernel(layer.kernel) @ (np.eye(8) - 0.1 * 0.4 * p)
        assert np.allclose(unroll_kernel(new_layer.kernel), expect, atol=1e-12)
        assert new_state.state.step == 1

    def test_reduced_precision_close_to_full(self):
        rng = np.random.default_rng(17)
        truth = ConvLayer(rng.standard_normal((2, 2, 2)))
        layer_full = ConvLayer(rng.standard_normal((2, 2, 2)))
        layer_half = ConvLayer(layer_full.kernel.copy())
        full = init_conv_state(layer_full, delta=10.0, storage="full")
        half = ConvRlsState(full.state.clone(), "reduced")
        cfg = GdConfig(0.02, iterations=5)
        for _ in range(20):
            fm = FeatureMap(rng.standard_normal((2, 4, 4)))
            target = conv_forward(fm, truth) + 0.05 * rng.standard_normal((3, 3))
            sset = SampleSet(1, [WeightedSample(fm, target, np.ones((3, 3)))])
            layer_full, full = conv_update_stage(layer_full, sset, full, cfg)
            layer_half, half = conv_update_stage(layer_half, sset, half, cfg)
        rel = np.linalg.norm(layer_half.kernel - layer_full.kernel) / np.linalg.norm(
            layer_full.kernel
        )
        assert rel <= 1e-2
        assert half.state.p_mat.dtype == np.float64


class TestSession:
    def _layer_and_state(self, rng):
        layer = ConvLayer(rng.standard_normal((1, 2, 2)))
        return layer, init_conv_state(layer, delta=1.0)

    def _event(self, rng, layer, t, **kw):
        sample = _random_sample(rng, layer, 1, 3, 3, gamma=np.ones((2, 2)))
        return ConvSessionEvent(t, sample=sample, **kw)

    def test_twenty_step_schedule(self):
        rng = np.random.default_rng(18)
        layer, state = self._layer_and_state(rng)
        events = [self._event(rng, layer, t) for t in range(1, 101)]
        cfg = ConvSessionConfig(GdConfig(0.01, iterations=1), update_period=20)
        _, audit = run_conv_session(layer, state, events, cfg)
        updates = [t for kind, t in audit if kind == "update"]
        assert updates == [1, 21, 41, 61, 81]

    def test_hard_negative_extra_update(self):
        rng = np.random.default_rng(19)
        layer, state = self._layer_and_state(rng)
        events = [
            self._event(rng, layer, t, hard_negative=(t == 7)) for t in range(1, 11)
        ]
        cfg = ConvSessionConfig(GdConfig(0.01, iterations=1), update_period=20)
        _, audit = run_conv_session(layer, state, events, cfg)
        updates = [t for kind, t in audit if kind == "update"]
        assert updates == [1, 7]
        assert ("hard_negative", 7) in audit

    def test_capacity_eviction(self):
        rng = np.random.default_rng(20)
        layer, state = self._layer_and_state(rng)
        events = [self._event(rng, layer, t) for t in range(1, 8)]
        cfg = ConvSessionConfig(GdConfig(0.01, iterations=1), sample_capacity=5)
        _, audit = run_conv_session(layer, state, events, cfg)
        evicted = [t for kind, t in audit if kind == "evict"]
        assert evicted == [1, 2]

    def test_unflagged_samples_skipped(self):
        rng = np.random.default_rng(21)
        layer, state = self._layer_and_state(rng)
        events = [
            self._event(rng, layer, 1),
            self._event(rng, layer, 2, update_flag=False),
        ]
        cfg = ConvSessionConfig(GdConfig(0.01, iterations=1))
        _, audit = run_conv_session(layer, state, events, cfg)
        assert [t for kind, t in audit if kind == "insert"] == [1]

    def test_protocol_error(self):
        rng = np.random.default_rng(22)
        layer, state = self._layer_and_state(rng)
        events = [self._event(rng, layer, 3), self._event(rng, layer, 2)]
        cfg = ConvSessionConfig(GdConfig(0.01, iterations=1))
        with pytest.raises(ProtocolError):
            run_conv_session(layer, state, events, cfg)


class TestSerialization:
    def test_feature_map_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        fm = FeatureMap(rng.standard_normal((3, 4, 5)))
        path = tmp_path / "fm.bin"
        write_feature_map(path, fm)
        back = read_feature_map(path)
        assert np.array_equal(back.data, fm.data)
        write_feature_map(tmp_path / "fm2.bin", back)
        assert (tmp_path / "fm.bin").read_bytes() == (tmp_path / "fm2.bin").read_bytes()

    def test_weighted_sample_round_trip(self, tmp_path):
        rng = np.random.default_rng(24)
        layer = ConvLayer(rng.standard_normal((2, 2, 2)))
        sample = _random_sample(rng, layer, 2, 4, 4)
        path = tmp_path / "ws.bin"
        write_weighted_sample(path, sample)
        back = read_weighted_sample(path)
        assert np.array_equal(back.features.data, sample.features.data)
        assert np.array_equal(back.target, sample.target)
        assert np.array_equal(back.gamma, sample.gamma)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(InputError):
            read_feature_map(path)


def test_empty_set_rejected():
    layer = ConvLayer(np.ones((1, 1, 1)))
    with pytest.raises(InputError):
        conv_loss(SampleSet(1), layer)
