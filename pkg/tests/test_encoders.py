import numpy as np
import pytest

from evtrack.autodiff import ParamStore, Tensor
from evtrack.encoders import EncoderConfig, FpnEncoder, MotionGatedFusion, mean_flow
from evtrack.errors import ConfigError


def make_encoder(channels=32, downsample=4, in_channels=1, seed=0, scale=1.0):
    store = ParamStore()
    cfg = EncoderConfig(channels=channels, downsample=downsample,
                        in_channels=in_channels, input_scale=scale)
    enc = FpnEncoder(store, "enc", cfg, np.random.default_rng(seed))
    return enc, store


def test_output_geometry_matches_hand_arithmetic():
    enc, _ = make_encoder(channels=128, in_channels=3)
    img = Tensor(np.random.default_rng(0).random((3, 180, 240)).astype(np.float32))
    out = enc(img)
    assert out.shape == (128, 45, 60)


def test_output_geometry_downsample8():
    enc, _ = make_encoder(channels=64, downsample=8)
    out = enc(Tensor(np.zeros((1, 180, 240), dtype=np.float32)))
    assert out.shape == (64, 23, 30)


def test_event_encoder_geometry():
    enc, _ = make_encoder(channels=128, in_channels=10)
    stack = Tensor(np.zeros((10, 180, 240), dtype=np.float32))
    assert enc(stack).shape == (128, 45, 60)


def test_determinism_and_zero_input():
    enc, store = make_encoder()
    rng = np.random.default_rng(3)
    img = Tensor(rng.random((1, 64, 64)).astype(np.float32))
    a = enc(img).data
    b = enc(img).data
    assert np.array_equal(a, b)

    # zero weights propagate only biases: constant output map
    for name, p in store.items():
        p.data[...] = 0.0
    out = enc(Tensor(rng.random((1, 64, 64)).astype(np.float32))).data
    assert np.allclose(out, out[:, :1, :1])


def test_weight_independence_between_encoders():
    store = ParamStore()
    cfg_f = EncoderConfig(channels=32, in_channels=1)
    cfg_e = EncoderConfig(channels=32, in_channels=10)
    rng = np.random.default_rng(0)
    frame_enc = FpnEncoder(store, "frame", cfg_f, rng)
    event_enc = FpnEncoder(store, "event", cfg_e, rng)
    stack = Tensor(np.random.default_rng(1).random((10, 32, 32)).astype(np.float32))
    before = event_enc(stack).data.copy()
    frame_enc.stem.weight.data += 10.0
    after = event_enc(stack).data
    assert np.array_equal(before, after)


def test_encoder_input_validation():
    enc, _ = make_encoder(in_channels=3)
    with pytest.raises(ConfigError):
        enc(Tensor(np.zeros((1, 32, 32), dtype=np.float32)))
    with pytest.raises(ConfigError):
        enc(Tensor(np.zeros((3, 2, 2), dtype=np.float32)))


def test_batched_equals_single():
    enc, _ = make_encoder()
    rng = np.random.default_rng(5)
    imgs = rng.random((3, 1, 32, 32)).astype(np.float32)
    batched = enc(Tensor(imgs)).data
    for i in range(3):
        single = enc(Tensor(imgs[i])).data
        assert np.allclose(batched[i], single, atol=1e-5)


class TestFusion:
    def setup_method(self):
        self.store = ParamStore()
        self.fusion = MotionGatedFusion(self.store, "fus", 16, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.f_i = Tensor(rng.random((16, 8, 8)).astype(np.float32))
        self.f_e = Tensor(rng.random((16, 8, 8)).astype(np.float32))

    def test_zero_init_gate_is_half(self):
        for dp in (0.0, 3.0, 100.0):
            assert self.fusion.gate_value(dp).data[0] == np.float32(0.5)

    def test_gate_saturation(self):
        self.fusion.gate.weight.data[...] = 1.0
        beta = self.fusion.gate_value(10.0).data[0]
        assert abs(beta - 0.99995) < 1e-4

    def test_gate_monotone_in_flow(self):
        self.fusion.gate.weight.data[...] = 0.7
        values = [self.fusion.gate_value(dp).data[0] for dp in (0.0, 1.0, 5.0, 20.0)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_output_shape_and_mismatch(self):
        out = self.fusion(self.f_i, self.f_e, 0.0)
        assert out.shape == (16, 8, 8)
        with pytest.raises(ConfigError):
            self.fusion(self.f_i, Tensor(np.zeros((16, 4, 4), dtype=np.float32)), 0.0)

    def test_events_only_ignores_frames(self):
        base = self.fusion(self.f_i, self.f_e, 0.0, use_frames=False).data
        other = self.fusion(self.f_i + 5.0, self.f_e, 0.0, use_frames=False).data
        assert np.array_equal(base, other)

    def test_frames_only_ignores_events(self):
        base = self.fusion(self.f_i, self.f_e, 0.0, use_events=False).data
        other = self.fusion(self.f_i, self.f_e + 5.0, 0.0, use_events=False).data
        assert np.array_equal(base, other)
        assert np.array_equal(base, self.f_i.data)


def test_mean_flow_cases():
    assert mean_flow(None, None) == 0.0
    prev1 = np.array([[3.0, 4.0], [0.0, 0.0]])
    prev2 = np.zeros((2, 2))
    assert mean_flow(prev1, prev2) == pytest.approx(2.5)
    active = np.array([True, False])
    assert mean_flow(prev1, prev2, active) == pytest.approx(5.0)
    assert mean_flow(prev1, prev1) == 0.0
