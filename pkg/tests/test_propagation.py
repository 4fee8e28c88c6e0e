import numpy as np
import pytest

from conftest import block_constant, textured
from keep.codebook import Codebook
from keep.errors import InvalidArgumentError, InvalidStateError, KeepIOError
from keep.io import write_flo
from keep.nets import ToyCodec
from keep.propagation import (
    BlockMatchingFlow,
    FixedGain,
    IngestedFlow,
    KeepConfig,
    KgnGain,
    OracleGain,
    default_threads,
    flow_for_step,
    run_keep,
)
from keep.state_space import LinearGaussianSystem, kalman_oracle


def test_single_frame_returns_round_trip():
    x = block_constant(64, 64, 3, seed=1)
    res = run_keep([x])
    assert len(res.restored) == 1
    np.testing.assert_array_equal(res.restored[0], x)


def test_empty_sequence_rejected():
    with pytest.raises(InvalidArgumentError):
        run_keep([])


def test_shape_drift_rejected():
    with pytest.raises(InvalidStateError):
        run_keep([np.zeros((32, 32, 1)), np.zeros((64, 32, 1))])


@pytest.mark.parametrize("k", [0.0, 0.3, 1.0])
def test_static_sequence_fixed_point(k):
    x = block_constant(64, 96, 3, seed=2)
    res = run_keep([x] * 4, KeepConfig(gain_source=FixedGain(k)))
    for y in res.restored:
        assert y.tobytes() == res.restored[0].tobytes()


def test_fixed_gain_rejects_out_of_range():
    with pytest.raises(InvalidArgumentError):
        FixedGain(1.5)


def test_gain_one_is_per_frame_restoration():
    frames = [textured(64, 64, 3, seed=s) for s in range(4)]
    codec = ToyCodec()
    res = run_keep(frames, KeepConfig(gain_source=FixedGain(1.0), codec=codec))
    for x, y in zip(frames, res.restored):
        assert y.tobytes() == codec.decode(codec.encode(x)).tobytes()


def test_posteriors_between_prior_and_observation():
    frames = [textured(64, 64, 1, seed=s) for s in range(5)]
    res = run_keep(frames, KeepConfig(seed=3))
    for pr, ob, po in zip(res.priors, res.observations, res.posteriors):
        assert np.all(po >= np.minimum(pr, ob)) and np.all(po <= np.maximum(pr, ob))
    assert all(len(s) == 5 for s in (res.restored, res.posteriors, res.gains, res.priors))
    gains = np.stack(res.gains[1:])
    assert np.all(gains > 0) and np.all(gains < 1)


def test_kgn_params_seeded_by_config():
    frames = [textured(64, 64, 3, seed=s) for s in range(3)]
    a = run_keep(frames, KeepConfig(seed=1)).mean_gains()
    b = run_keep(frames, KeepConfig(seed=1)).mean_gains()
    c = run_keep(frames, KeepConfig(seed=2)).mean_gains()
    assert a == b and a != c
    assert a[0] == 1.0


def test_oracle_gain_scalar_system_matches_oracle():
    system = LinearGaussianSystem(F=0.9, H=1.0, Q=0.02, R=0.05, P0=0.05)
    values = [0.5, 0.6, 0.4, 0.55, 0.52, 0.48]
    frames = [np.full((32, 32, 1), v) for v in values]
    res = run_keep(frames, KeepConfig(gain_source=OracleGain(system)))
    ref = kalman_oracle(system, values[1:], values[0])
    for post, s in zip(res.posteriors[1:], ref):
        assert abs(post[0, 0, 0] - s.posterior_mean) < 1e-12


def test_oracle_gain_non_unit_h():
    system = LinearGaussianSystem(F=1.0, H=2.0, Q=0.1, R=0.4, P0=0.1)
    z = [1.0, 1.2, 0.8, 1.1]
    frames = [np.full((32, 32, 1), v) for v in z]
    res = run_keep(frames, KeepConfig(gain_source=OracleGain(system)))
    ref = kalman_oracle(system, z[1:], z[0] / 2.0)
    for post, s in zip(res.posteriors[1:], ref):
        assert abs(post[0, 0, 0] - s.posterior_mean) < 1e-12


def test_quantize_after_update():
    book = Codebook.random(n=8, d=1, seed=0)
    frames = [block_constant(64, 64, 1, seed=s) for s in range(3)]
    res = run_keep(frames, KeepConfig(quantize_after_update=True, codebook=book, gain_source=FixedGain(0.5)))
    for post in res.posteriors[1:]:
        assert set(post.ravel().tolist()) <= set(book.codes.ravel().tolist())
    with pytest.raises(InvalidArgumentError):
        run_keep(frames, KeepConfig(quantize_after_update=True))


def test_cfa_changes_output_but_keeps_shape():
    frames = [textured(64, 64, 2, seed=s) for s in range(3)]
    plain = run_keep(frames, KeepConfig(gain_source=FixedGain(0.5)))
    cfa = run_keep(frames, KeepConfig(gain_source=FixedGain(0.5), cfa_enabled=True))
    assert cfa.restored[2].shape == plain.restored[2].shape
    assert cfa.restored[0].tobytes() == plain.restored[0].tobytes()
    assert not np.array_equal(cfa.restored[2], plain.restored[2])


def test_flow_for_step_static_and_translation():
    f = textured(48, 48, 1, seed=0)
    assert np.all(flow_for_step([f, f], 2, KeepConfig()) == 0)
    big = textured(70, 70, 1, seed=9)
    prev, nxt = big[10:58, 10:58], big[13:61, 12:60]
    flow = flow_for_step([prev, nxt], 2, KeepConfig(flow_source=BlockMatchingFlow(8, 4)))
    assert np.all(flow[8:40, 8:40] == np.array([2.0, 3.0]))
    with pytest.raises(InvalidArgumentError):
        flow_for_step([f, f], 1, KeepConfig())


def test_ingested_flows(tmp_path):
    flow = np.random.default_rng(0).uniform(-2, 2, size=(32, 32, 2)).astype(np.float32).astype(np.float64)
    frames = [np.zeros((32, 32, 1))] * 3
    np.testing.assert_array_equal(flow_for_step(frames, 2, KeepConfig(flow_source=IngestedFlow(flows=(flow,)))), flow)
    write_flo(tmp_path / "flow_000002.flo", flow)
    cfg = KeepConfig(flow_source=IngestedFlow(directory=str(tmp_path)))
    np.testing.assert_array_equal(flow_for_step(frames, 2, cfg), flow)
    with pytest.raises(KeepIOError, match="3"):
        flow_for_step(frames, 3, cfg)


def test_default_threads(monkeypatch):
    monkeypatch.setenv("KEEP_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("KEEP_THREADS", "x")
    with pytest.raises(InvalidArgumentError):
        default_threads()
    monkeypatch.delenv("KEEP_THREADS")
    assert default_threads() >= 1
