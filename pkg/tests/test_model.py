"""Model assembly, inference contracts, and checkpoint serialization."""

import numpy as np
import pytest

from vocalscreen.model import (
    BatchSizeMismatchError,
    ChecksumFailureError,
    CorruptFileError,
    ModelConfig,
    ScreeningModel,
    VersionMismatchError,
    encode_fragment,
    load_checkpoint,
    predict_subject,
    save_checkpoint,
)
from vocalscreen.neuralkit import grad_check


TINY = ModelConfig(encoder="cnn_gru", kernel_size=3, n_fragments=2,
                   n_filters=6, feature_dim=8, head_hidden=8,
                   n_mels=24, frag_width=5)


def tiny_model(encoder="cnn_gru", seed=11, **kw):
    cfg = ModelConfig(**{**TINY.to_dict(), "encoder": encoder, **kw})
    return ScreeningModel(cfg, seed)


def tiny_batch(model, B=2, seed=0):
    c = model.config
    rng = np.random.default_rng(seed)
    x = rng.random((B, c.n_fragments, c.n_mels, c.frag_width))
    return x.astype(np.float32)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(encoder="transformer")
    with pytest.raises(ValueError):
        ModelConfig(kernel_size=4)
    with pytest.raises(ValueError):
        ModelConfig(n_fragments=0)
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
    d = ModelConfig(encoder="cnn", kernel_size=7, n_fragments=30).to_dict()
    assert ModelConfig.from_dict(d) == ModelConfig(
        encoder="cnn", kernel_size=7, n_fragments=30)


def test_default_head_width_n15():
    m = ScreeningModel(ModelConfig(), seed=0)
    assert m.head_dense.p["w"].shape[0] == 15 * 128 == 1920


def test_encode_fragment_length_128_default():
    m = ScreeningModel(ModelConfig(), seed=1)
    frag = np.random.default_rng(2).random((128, 16)).astype(np.float32)
    v = encode_fragment(m, frag)
    assert v.shape == (128,)


def test_encode_deterministic_and_nonnegative():
    m = tiny_model()
    frag = np.random.default_rng(3).random((24, 5)).astype(np.float32)
    a = encode_fragment(m, frag)
    b = encode_fragment(m, frag)
    np.testing.assert_array_equal(a, b)

    z = encode_fragment(m, np.zeros((24, 5), dtype=np.float32))
    assert np.all(z >= 0.0)  # zero input, zero biases, ReLU outputs


@pytest.mark.parametrize("encoder", ["cnn", "cnn_lstm", "cnn_gru"])
def test_time_distributed_contract(encoder):
    m = tiny_model(encoder)
    frags = np.random.default_rng(4).random((5, 24, 5)).astype(np.float32)
    alone, _ = m.encode(frags[2:3], "infer")
    batched, _ = m.encode(frags, "infer")
    np.testing.assert_array_equal(alone[0], batched[2])


@pytest.mark.parametrize("encoder", ["cnn", "cnn_lstm", "cnn_gru"])
def test_predict_in_open_unit_interval(encoder):
    m = tiny_model(encoder)
    x = tiny_batch(m, B=3)
    p = m.predict(x)
    assert p.shape == (3,)
    assert np.all(p > 0.0) and np.all(p < 1.0)

    # even with saturating parameters the clip keeps it inside (0, 1)
    for v in m.p.values():
        v[:] = 10.0
    p = m.predict(1000.0 * x)
    assert np.all(p > 0.0) and np.all(p < 1.0)


def test_predict_order_sensitive():
    m = tiny_model()
    x = tiny_batch(m, B=1, seed=5)
    swapped = x[:, ::-1].copy()
    assert m.predict(x)[0] != m.predict(swapped)[0]


def test_batch_size_mismatch():
    m = tiny_model()
    with pytest.raises(BatchSizeMismatchError):
        m.forward(np.zeros((1, 3, 24, 5), dtype=np.float32))
    with pytest.raises(BatchSizeMismatchError):
        m.encode(np.zeros((2, 24, 4), dtype=np.float32))


def test_train_mode_requires_rng_and_differs():
    m = tiny_model()
    x = tiny_batch(m)
    with pytest.raises(ValueError):
        m.forward(x, "train")
    a, _ = m.forward(x, "train", np.random.default_rng(6))
    b, _ = m.forward(x, "infer")
    assert not np.array_equal(a, b)  # dropout active only in training


class _PoolIndex:
    """Stub corpus index: one pool of fragments per speaker."""

    def __init__(self, pool):
        self.pool = pool

    def sample_fragments(self, speaker_id, n, rng):
        idx = rng.choice(len(self.pool), size=n,
                         replace=len(self.pool) < n)
        return self.pool[idx]


def test_predict_subject_r1_and_determinism():
    m = tiny_model()
    pool = np.random.default_rng(7).random((40, 24, 5)).astype(np.float32)
    index = _PoolIndex(pool)

    draws = index.sample_fragments("s", 2, np.random.default_rng(42))
    direct = float(m.predict(draws[None])[0])
    r1 = predict_subject(m, index, "s", repeats=1,
                         rng=np.random.default_rng(42))
    assert r1 == direct

    a = predict_subject(m, index, "s", repeats=10,
                        rng=np.random.default_rng(9))
    b = predict_subject(m, index, "s", repeats=10,
                        rng=np.random.default_rng(9))
    assert a == b
    with pytest.raises(ValueError):
        predict_subject(m, index, "s", repeats=0, rng=np.random.default_rng(0))


def test_predict_subject_variance_slope():
    # var of the R-draw mean ~ sigma^2 / R: log-log slope -1 +- 0.2
    m = tiny_model(seed=13)
    pool = np.random.default_rng(8).random((60, 24, 5)).astype(np.float32)
    index = _PoolIndex(pool)
    repeats = [1, 4, 16]
    variances = []
    for r in repeats:
        scores = [predict_subject(m, index, "s", repeats=r,
                                  rng=np.random.default_rng([trial, r]))
                  for trial in range(120)]
        variances.append(np.var(scores))
    slope = np.polyfit(np.log(repeats), np.log(variances), 1)[0]
    assert -1.2 < slope < -0.8


@pytest.mark.parametrize("encoder", ["cnn", "cnn_lstm", "cnn_gru"])
def test_end_to_end_gradient(encoder):
    m = tiny_model(encoder, seed=21)
    x = tiny_batch(m, B=2, seed=22).astype(np.float64)
    x += np.sign(x - 0.5) * 0.02  # keep ReLU kinks out of FD reach
    report = grad_check(m, x, np.random.default_rng(23), n_coords=250)
    assert report["max_rel_err"] < 1e-3
    assert report["n_checked"] == 250


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = tiny_model("cnn_lstm", seed=31)
    x = tiny_batch(m, B=3, seed=32)
    before = m.predict(x)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path, metadata={"seed": 31, "epoch": 4, "fold": 0})
    ckpt = load_checkpoint(path)
    np.testing.assert_array_equal(ckpt.model.predict(x), before)
    assert ckpt.metadata == {"seed": 31, "epoch": 4, "fold": 0}
    assert ckpt.trainer_state is None


def test_checkpoint_records_exact_config(tmp_path):
    cfg = ModelConfig(encoder="cnn_gru", kernel_size=5, n_fragments=15)
    m = ScreeningModel(cfg, seed=33)
    path = tmp_path / "best.ckpt"
    save_checkpoint(m, path)
    ckpt = load_checkpoint(path)
    assert ckpt.config == cfg
    for k, v in m.p.items():
        np.testing.assert_array_equal(ckpt.model.p[k], v)


def test_checkpoint_trainer_state_round_trip(tmp_path):
    m = tiny_model(seed=34)
    state = {"step": 17,
             "m": {k: np.full_like(v, 0.25) for k, v in m.p.items()},
             "s": {k: np.full_like(v, 0.5) for k, v in m.p.items()}}
    path = tmp_path / "resume.ckpt"
    save_checkpoint(m, path, trainer_state=state)
    ckpt = load_checkpoint(path)
    assert ckpt.trainer_state["step"] == 17
    for k in m.p:
        np.testing.assert_array_equal(ckpt.trainer_state["m"][k],
                                      state["m"][k])
        np.testing.assert_array_equal(ckpt.trainer_state["s"][k],
                                      state["s"][k])


def test_checkpoint_tamper_detection(tmp_path):
    m = tiny_model(seed=35)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 0xFF  # flip one payload byte
    bad = tmp_path / "tampered.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ChecksumFailureError):
        load_checkpoint(bad)


def test_checkpoint_version_and_corruption(tmp_path):
    m = tiny_model(seed=36)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()

    future = tmp_path / "future.ckpt"
    future.write_bytes(raw[:4] + b"\x63\x00" + raw[6:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(future)

    notmine = tmp_path / "other.bin"
    notmine.write_bytes(b"RIFF" + raw[4:])
    with pytest.raises(CorruptFileError):
        load_checkpoint(notmine)

    short = tmp_path / "short.ckpt"
    short.write_bytes(raw[:30])
    with pytest.raises(CorruptFileError):
        load_checkpoint(short)
