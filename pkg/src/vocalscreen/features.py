"""Log-mel spectrograms and overlapping fragments.

Parameters
----------
The pipeline is fixed by ``FrameSpec``: 1024-point FFT with hop 500 at
8 kHz (62.5 ms hop, so one second of audio yields exactly 16 frames),
128 triangular mel filters between 0 and 4 kHz, decibel scaling relative
to the per-recording maximum with a -80 dB floor, and fragments of 16
consecutive frames advanced one frame at a time.

Fragments are stored frequency-major (128 bands x 16 frames) and
normalized from [-80, 0] dB into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptySignalError(ValueError):
    """Raised when a zero-length signal reaches the STFT."""


@dataclass(frozen=True)
class FrameSpec:
    """Fixed analysis parameters for the whole pipeline."""

    sample_rate: int = 8000
    n_fft: int = 1024
    hop: int = 500
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 4000.0
    db_floor: float = -80.0
    fragment_width: int = 16
    fragment_hop: int = 1


@dataclass
class FilterBank:
    """Triangular mel filter matrix and the Hz positions of its edges."""

    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    band_edges_hz: np.ndarray  # (n_mels + 2,)


@dataclass
class MelFragment:
    """One normalized 128 x 16 (band x frame) patch."""

    values: np.ndarray
    source_id: str
    start_frame: int


def hz_to_mel(f):
    """HTK mel scale: mel = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    """Inverse of :func:`hz_to_mel`."""
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(spec: FrameSpec = FrameSpec()) -> FilterBank:
    """Build the (n_mels, n_fft//2 + 1) triangular filter matrix.

    Edges are n_mels + 2 points equally spaced in mel between fmin and
    fmax; filter i rises over [edge_i, edge_{i+1}] and falls over
    [edge_{i+1}, edge_{i+2}].  Each row is rescaled so its peak sampled
    weight is exactly 1.
    """
    n_bins = spec.n_fft // 2 + 1
    edges_hz = mel_to_hz(
        np.linspace(hz_to_mel(spec.fmin), hz_to_mel(spec.fmax), spec.n_mels + 2)
    )
    fft_hz = np.arange(n_bins) * spec.sample_rate / spec.n_fft

    weights = np.zeros((spec.n_mels, n_bins))
    for i in range(spec.n_mels):
        lo, mid, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rising = (fft_hz - lo) / (mid - lo)
        falling = (hi - fft_hz) / (hi - mid)
        weights[i] = np.clip(np.minimum(rising, falling), 0.0, None)
        peak = weights[i].max()
        if peak <= 0.0:
            raise ValueError(f"mel filter {i} has empty support; check FrameSpec")
        weights[i] /= peak
    return FilterBank(weights=weights, band_edges_hz=edges_hz)


def frame_count(n_samples: int, spec: FrameSpec = FrameSpec()) -> int:
    """Number of STFT frames for a signal: ceil(n / hop)."""
    return -(-int(n_samples) // spec.hop)


def stft_power(samples: np.ndarray, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Power spectrogram, shape (T, n_fft//2 + 1) with T = ceil(n / hop).

    The signal is reflect-padded by n_fft//2 on both sides so frame t is
    centered on sample t * hop.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected 1-D signal, got shape {x.shape}")
    if len(x) == 0:
        raise EmptySignalError("cannot analyze an empty signal")

    T = frame_count(len(x), spec)
    pad = spec.n_fft // 2
    if len(x) == 1:
        xp = np.full(2 * pad + 1, x[0])
    else:
        xp = np.pad(x, pad, mode="reflect")

    idx = np.arange(T)[:, None] * spec.hop + np.arange(spec.n_fft)[None, :]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(spec.n_fft) / spec.n_fft)
    frames = xp[idx] * window
    spectrum = np.fft.rfft(frames, n=spec.n_fft, axis=1)
    return np.abs(spectrum) ** 2


def power_to_db(mel_power: np.ndarray, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """10 * log10(p / max(p)), floored at db_floor.

    The reference is the per-recording maximum, so the largest cell maps
    to exactly 0 dB.  An all-zero input maps entirely to the floor.
    """
    p = np.asarray(mel_power, dtype=np.float64)
    ref = p.max() if p.size else 0.0
    if ref <= 0.0:
        return np.full(p.shape, spec.db_floor)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(p / ref)
    return np.maximum(db, spec.db_floor)


def melspectrogram_db(
    samples: np.ndarray,
    spec: FrameSpec = FrameSpec(),
    filterbank: FilterBank | None = None,
) -> np.ndarray:
    """Full front half of the pipeline: signal -> (T, n_mels) dB matrix."""
    fb = filterbank if filterbank is not None else build_mel_filterbank(spec)
    power = stft_power(samples, spec)
    mel_power = power @ fb.weights.T
    return power_to_db(mel_power, spec)


def fragment_count(n_frames: int, spec: FrameSpec = FrameSpec()) -> int:
    """max(0, T - width + 1) fragments at hop 1."""
    if spec.fragment_hop != 1:
        return max(0, (int(n_frames) - spec.fragment_width) // spec.fragment_hop + 1)
    return max(0, int(n_frames) - spec.fragment_width + 1)


def fragment_stack(mel_db: np.ndarray, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """All fragments of a spectrogram as one (count, n_mels, width) array.

    Fragment i covers frames [i, i + width); values are transposed to
    frequency-major order and normalized as (db - floor) / -floor so the
    dB range [-80, 0] maps onto [0, 1].  Adjacent fragments share
    width - 1 identical columns by construction.
    """
    m = np.asarray(mel_db, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != spec.n_mels:
        raise ValueError(f"expected (T, {spec.n_mels}) spectrogram, got {m.shape}")
    count = fragment_count(m.shape[0], spec)
    if count == 0:
        return np.zeros((0, spec.n_mels, spec.fragment_width), dtype=np.float32)
    # windows[i, band, j] = m[i + j, band]: the transpose happens for free.
    windows = np.lib.stride_tricks.sliding_window_view(m, spec.fragment_width, axis=0)
    scaled = (windows - spec.db_floor) / -spec.db_floor
    return scaled.astype(np.float32)


def fragment(
    mel_db: np.ndarray, source_id: str, spec: FrameSpec = FrameSpec()
) -> list[MelFragment]:
    """Fragment a spectrogram into MelFragment records (see fragment_stack)."""
    stack = fragment_stack(mel_db, spec)
    return [
        MelFragment(values=stack[i], source_id=source_id, start_frame=i)
        for i in range(stack.shape[0])
    ]


# On-disk cache for fragment stacks: 16-byte header then row-major
# float32 little-endian values.
_CACHE_MAGIC = b"MELF"
_CACHE_VERSION = 1
_CACHE_HEADER = "<4sHHIHH"  # magic, version, reserved, count, n_mels, width


class FragmentCacheError(ValueError):
    """Raised for malformed fragment cache files."""


def save_fragment_stack(path, stack: np.ndarray) -> None:
    import struct

    count, n_mels, width = stack.shape
    header = struct.pack(_CACHE_HEADER, _CACHE_MAGIC, _CACHE_VERSION, 0, count, n_mels, width)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(stack, dtype="<f4").tobytes())


def load_fragment_stack(path) -> np.ndarray:
    import struct

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FragmentCacheError(f"{path}: truncated header")
    magic, version, _, count, n_mels, width = struct.unpack_from(_CACHE_HEADER, blob, 0)
    if magic != _CACHE_MAGIC:
        raise FragmentCacheError(f"{path}: bad magic {magic!r}")
    if version != _CACHE_VERSION:
        raise FragmentCacheError(f"{path}: unsupported version {version}")
    expected = 16 + count * n_mels * width * 4
    if len(blob) != expected:
        raise FragmentCacheError(f"{path}: expected {expected} bytes, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=16)
    return values.reshape(count, n_mels, width).copy()
