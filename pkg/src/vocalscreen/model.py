"""Fragment encoders and the screening head.

A model encodes each mel fragment independently (time-distributed
contract), concatenates the N feature vectors in draw order, and maps
them through a dense head to a single logit.  ``predict`` applies the
sigmoid; training code consumes the logit directly.

Checkpoints are a self-contained binary format: magic ``STSC``, a u16
format version, a JSON header describing config/metadata and a block
manifest, raw little-endian float parameter blocks, and a trailing
CRC32 of the payload.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .neuralkit import Conv1d, Dense, Dropout, GRU, LSTM, GlobalMaxPool, sigmoid

ENCODER_TYPES = ("cnn", "cnn_lstm", "cnn_gru")

CHECKPOINT_MAGIC = b"STSC"
CHECKPOINT_VERSION = 1

# predictions are clipped into this open interval so downstream log()
# calls and the (0,1) output contract survive float32 saturation
PROB_EPS = 1e-7


class ModelError(Exception):
    pass


class BatchSizeMismatchError(ModelError):
    pass


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumFailureError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    The screening grid uses encoder in {cnn, cnn_lstm, cnn_gru},
    kernel_size in {3, 5, 7} and n_fragments in {5, 10, 15, 30, 60};
    that domain is enforced by the grid driver, not here, so unit-scale
    configs remain constructible for gradient checking.
    """

    encoder: str = "cnn_gru"
    kernel_size: int = 5
    n_fragments: int = 15
    n_filters: int = 128
    feature_dim: int = 128
    head_hidden: int = 128
    dropout: float = 0.1
    n_mels: int = 128
    frag_width: int = 16

    def __post_init__(self):
        if self.encoder not in ENCODER_TYPES:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        for name in ("n_fragments", "n_filters", "feature_dim",
                     "head_hidden", "n_mels", "frag_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    """A deserialized checkpoint: the model plus what was saved with it."""

    config: ModelConfig
    model: "ScreeningModel"
    metadata: dict = field(default_factory=dict)
    trainer_state: dict | None = None


class ScreeningModel:
    """Encoder + head with explicit forward/backward passes.

    Parameters live in ``self.p``, a flat name -> array dict whose
    entries are shared views of the layer parameters, so optimizers and
    the gradient checker can mutate them in place.
    """

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.conv = Conv1d(c.kernel_size, c.frag_width, c.n_filters, rng)
        if c.encoder == "cnn_lstm":
            self.rnn = LSTM(c.n_filters, c.n_filters, rng)
        elif c.encoder == "cnn_gru":
            self.rnn = GRU(c.n_filters, c.n_filters, rng)
        else:
            self.rnn = None
        self.pool = GlobalMaxPool()
        self.enc_dense = Dense(c.n_filters, c.feature_dim, "relu", rng)
        self.enc_drop = Dropout(c.dropout)
        self.head_dense = Dense(c.n_fragments * c.feature_dim, c.head_hidden,
                                "relu", rng)
        self.head_drop = Dropout(c.dropout)
        self.head_out = Dense(c.head_hidden, 1, None, rng)
        self._rebuild_param_index()

    def _rebuild_param_index(self):
        self.p = {}
        for lname, layer in self._layers():
            for k, v in layer.p.items():
                self.p[f"{lname}.{k}"] = v

    def _layers(self):
        out = [("conv", self.conv)]
        if self.rnn is not None:
            out.append(("rnn", self.rnn))
        out += [("enc_dense", self.enc_dense),
                ("head_dense", self.head_dense),
                ("head_out", self.head_out)]
        return out

    def params(self) -> dict:
        return self.p

    def cast(self, dtype) -> "ScreeningModel":
        for _, layer in self._layers():
            layer.cast(dtype)
        self._rebuild_param_index()
        return self

    def n_params(self) -> int:
        return sum(v.size for v in self.p.values())

    # --- encoder ---

    def encode(self, frags: np.ndarray, mode: str = "infer", rng=None):
        """Map (M, n_mels, frag_width) fragments to (M, feature_dim).

        The conv/rnn sequence axis is frequency: each fragment enters as
        a length-n_mels sequence of frag_width-channel time slices.
        Returns (features, cache).
        """
        c = self.config
        if frags.ndim != 3 or frags.shape[1:] != (c.n_mels, c.frag_width):
            raise BatchSizeMismatchError(
                f"expected (M, {c.n_mels}, {c.frag_width}), got {frags.shape}")
        h, conv_cache = self.conv.forward(frags)
        rnn_cache = None
        if self.rnn is not None:
            h, rnn_cache = self.rnn.forward(h)
        pooled, pool_cache = self.pool.forward(h)
        feat, dense_cache = self.enc_dense.forward(pooled)
        feat, drop_cache = self.enc_drop.forward(feat, mode, rng)
        cache = {"conv": conv_cache, "rnn": rnn_cache, "pool": pool_cache,
                 "dense": dense_cache, "drop": drop_cache}
        return feat, cache

    def encode_backward(self, dfeat: np.ndarray, cache: dict):
        grads = {}
        d, _ = self.enc_drop.backward(dfeat, cache["drop"])
        d, g = self.enc_dense.backward(d, cache["dense"])
        grads.update({f"enc_dense.{k}": v for k, v in g.items()})
        d, _ = self.pool.backward(d, cache["pool"])
        if self.rnn is not None:
            d, g = self.rnn.backward(d, cache["rnn"])
            grads.update({f"rnn.{k}": v for k, v in g.items()})
        d, g = self.conv.backward(d, cache["conv"])
        grads.update({f"conv.{k}": v for k, v in g.items()})
        return d, grads

    # --- full forward to the logit ---

    def forward(self, batch: np.ndarray, mode: str = "infer", rng=None):
        """(B, N, n_mels, frag_width) -> ((B, 1) logit, cache)."""
        c = self.config
        if batch.ndim != 4 or batch.shape[1] != c.n_fragments:
            raise BatchSizeMismatchError(
                f"expected (B, {c.n_fragments}, {c.n_mels}, {c.frag_width}), "
                f"got {batch.shape}")
        B = batch.shape[0]
        flat_in = batch.reshape(B * c.n_fragments, c.n_mels, c.frag_width)
        feat, enc_cache = self.encode(flat_in, mode, rng)
        stacked = feat.reshape(B, c.n_fragments * c.feature_dim)
        hidden, hd_cache = self.head_dense.forward(stacked)
        hidden, drop_cache = self.head_drop.forward(hidden, mode, rng)
        logit, out_cache = self.head_out.forward(hidden)
        cache = {"enc": enc_cache, "hd": hd_cache, "drop": drop_cache,
                 "out": out_cache, "batch_shape": batch.shape}
        return logit, cache

    def backward(self, dlogit: np.ndarray, cache: dict):
        """Gradient of a scalar loss through the whole model.

        Takes dL/dlogit of shape (B, 1); returns (dL/dbatch, grads)
        with grads keyed like ``self.p``.
        """
        grads = {}
        d, g = self.head_out.backward(dlogit, cache["out"])
        grads.update({f"head_out.{k}": v for k, v in g.items()})
        d, _ = self.head_drop.backward(d, cache["drop"])
        d, g = self.head_dense.backward(d, cache["hd"])
        grads.update({f"head_dense.{k}": v for k, v in g.items()})
        B, N, n_mels, width = cache["batch_shape"]
        d = d.reshape(B * N, self.config.feature_dim)
        d, enc_grads = self.encode_backward(d, cache["enc"])
        grads.update(enc_grads)
        return d.reshape(B, N, n_mels, width), grads

    # --- inference ---

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """(B, N, n_mels, frag_width) -> (B,) probabilities in (0, 1)."""
        logit, _ = self.forward(batch, "infer")
        p = sigmoid(logit[:, 0])
        return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def encode_fragment(model: ScreeningModel, fragment: np.ndarray) -> np.ndarray:
    """Encode one (n_mels, frag_width) fragment to a feature vector."""
    feat, _ = model.encode(fragment[None], "infer")
    return feat[0]


def predict_subject(model: ScreeningModel, index, record,
                    repeats: int = 10, rng=None) -> float:
    """Average ``repeats`` independent fragment-draw predictions.

    ``index`` is a corpus index exposing sample_fragments(record, n,
    rng); each repeat draws a fresh N-fragment stack and the scores are
    averaged (inference mode throughout).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if rng is None:
        raise ValueError("an explicit rng is required for reproducibility")
    n = model.config.n_fragments
    total = 0.0
    for _ in range(repeats):
        drawn = index.sample_fragments(record, n, rng)
        stack = getattr(drawn, "values", drawn)
        total += float(model.predict(stack[None])[0])
    return total / repeats


# --- checkpoint serialization ---


def _block_manifest(arrays: dict, prefix: str, offset: int):
    manifest = []
    blobs = []
    for name in arrays:
        a = np.ascontiguousarray(arrays[name])
        raw = a.astype("<f4" if a.dtype == np.float32 else "<f8",
                       copy=False).tobytes()
        manifest.append({"name": f"{prefix}:{name}", "shape": list(a.shape),
                         "dtype": str(np.dtype("<f4" if a.dtype == np.float32
                                               else "<f8")),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return manifest, blobs, offset


def save_checkpoint(model: ScreeningModel, path, metadata: dict | None = None,
                    trainer_state: dict | None = None) -> None:
    """Write the model (and optional trainer state) to ``path``."""
    manifest, blobs, offset = _block_manifest(model.p, "p", 0)
    trainer_header = None
    if trainer_state is not None:
        trainer_header = {"step": int(trainer_state["step"])}
        for key in ("m", "s"):
            part, more, offset = _block_manifest(trainer_state[key], key, offset)
            manifest += part
            blobs += more
    header = {
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "blocks": manifest,
        "trainer": trainer_header,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; forward outputs reproduce bit-exactly."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 10 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    body = 10 + header_len
    if len(raw) < body + 4:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"{path}: unreadable header: {e}") from e
    payload = raw[body:-4]
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumFailureError(f"{path}: payload checksum mismatch")

    config = ModelConfig.from_dict(header["config"])
    model = ScreeningModel(config, seed=0)
    blocks = {}
    for blk in header["blocks"]:
        start, n = blk["offset"], blk["nbytes"]
        if start + n > len(payload):
            raise CorruptFileError(f"{path}: block {blk['name']} out of range")
        arr = np.frombuffer(payload[start:start + n], dtype=blk["dtype"])
        blocks[blk["name"]] = arr.reshape(blk["shape"]).copy()
    for name, value in model.p.items():
        key = f"p:{name}"
        if key not in blocks:
            raise CorruptFileError(f"{path}: missing parameter block {name}")
        if blocks[key].shape != value.shape:
            raise CorruptFileError(f"{path}: shape mismatch for {name}")
        value[:] = blocks[key]

    trainer_state = None
    if header.get("trainer") is not None:
        trainer_state = {"step": header["trainer"]["step"], "m": {}, "s": {}}
        for key, arr in blocks.items():
            kind, _, pname = key.partition(":")
            if kind in ("m", "s"):
                trainer_state[kind][pname] = arr
    return Checkpoint(config=config, model=model,
                      metadata=header.get("metadata", {}),
                      trainer_state=trainer_state)
