"""WAV decoding, encoding and sample-rate conversion.

Only the two encodings that occur in practice are supported: PCM 16-bit
and IEEE float32, mono or stereo.  Everything else is rejected loudly --
silently mis-scaled audio is much harder to debug than an exception.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class AudioError(Exception):
    """Base class for decode/encode failures."""


class CorruptHeaderError(AudioError):
    """RIFF structure is malformed or truncated."""


class UnsupportedEncodingError(AudioError):
    """The file is a valid WAV but not PCM16 / float32."""


@dataclass
class AudioBuffer:
    """Mono audio in [-1, 1] with its sample rate."""

    samples: np.ndarray  # 1-D float64
    sample_rate: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / float(self.sample_rate)


def load_wav(path) -> AudioBuffer:
    """Decode a RIFF/WAVE file to a mono AudioBuffer.

    PCM 16-bit samples are scaled by 1/32768 (so -32768 maps to -1.0
    exactly); float32 samples are taken as-is.  Stereo is averaged
    across channels before scaling.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise CorruptHeaderError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        pos += 8
        if pos + size > len(blob):
            raise CorruptHeaderError(f"{path}: chunk {cid!r} overruns file")
        if cid == b"fmt ":
            if size < 16:
                raise CorruptHeaderError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", blob, pos)
        elif cid == b"data":
            data = blob[pos : pos + size]
        pos += size + (size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise CorruptHeaderError(f"{path}: missing fmt or data chunk")

    audio_format, n_channels, sample_rate, _, block_align, bits = fmt
    if n_channels not in (1, 2):
        raise UnsupportedEncodingError(f"{path}: {n_channels} channels")
    if sample_rate <= 0:
        raise CorruptHeaderError(f"{path}: bad sample rate {sample_rate}")

    if audio_format == 1 and bits == 16:
        width = 2
        raw_dtype = "<i2"
    elif audio_format == 3 and bits == 32:
        width = 4
        raw_dtype = "<f4"
    else:
        raise UnsupportedEncodingError(
            f"{path}: format tag {audio_format} with {bits}-bit samples"
        )

    frame_bytes = width * n_channels
    if block_align not in (0, frame_bytes):
        raise CorruptHeaderError(f"{path}: block align {block_align} != {frame_bytes}")
    if len(data) % frame_bytes != 0:
        raise CorruptHeaderError(f"{path}: data chunk not a whole number of frames")

    x = np.frombuffer(data, dtype=raw_dtype).astype(np.float64)
    if n_channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    if audio_format == 1:
        x = x / 32768.0
    else:
        x = np.clip(x, -1.0, 1.0)
    return AudioBuffer(samples=x, sample_rate=int(sample_rate))


def write_wav(path, buffer: AudioBuffer, encoding: str = "pcm16") -> None:
    """Write a mono AudioBuffer, for golden-file round trips and synthesis.

    ``pcm16`` quantizes with round-half-away and clips to int16 range, so
    any value of the form k/32768 survives a write/load cycle bit-exactly.
    """
    x = np.asarray(buffer.samples, dtype=np.float64)
    if encoding == "pcm16":
        fmt_tag, bits = 1, 16
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
    elif encoding == "float32":
        fmt_tag, bits = 3, 32
        payload = x.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    width = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        fmt_tag,
        1,
        buffer.sample_rate,
        buffer.sample_rate * width,
        width,
        bits,
        b"data",
        len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


# Resampling: windowed-sinc interpolation with a Kaiser window.  When
# downsampling, the sinc is scaled by the rate ratio so the kernel both
# interpolates and anti-alias filters; its support is 16 zero crossings
# per side at the narrower of the two Nyquist rates (32 taps per output
# sample at the cutoff rate).
_KAISER_BETA = 8.6
_HALF_ZEROS = 16


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Resample to target_rate; output length is round(n * target/source)."""
    if target_rate <= 0:
        raise ValueError(f"bad target rate {target_rate}")
    src = buffer.sample_rate
    if src == target_rate:
        return AudioBuffer(buffer.samples.copy(), src)

    x = np.asarray(buffer.samples, dtype=np.float64)
    n_out = int(round(len(x) * target_rate / src))
    if len(x) == 0 or n_out == 0:
        return AudioBuffer(np.zeros(0), target_rate)

    # r < 1 when downsampling: cutoff at the target Nyquist.
    r = min(1.0, target_rate / src)
    half = int(np.ceil(_HALF_ZEROS / r))  # kernel half-width in input samples
    xp = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])

    i0_beta = np.i0(_KAISER_BETA)
    step = src / target_rate
    out = np.empty(n_out)
    # Chunked so the (chunk, 2*half) weight matrix stays small.
    chunk = max(1, (1 << 20) // (2 * half))
    offsets = np.arange(-half + 1, half + 1)
    for lo in range(0, n_out, chunk):
        hi = min(lo + chunk, n_out)
        t = np.arange(lo, hi) * step
        base = np.floor(t).astype(np.int64)
        u = (base[:, None] + offsets[None, :]) - t[:, None]  # tap offsets from t
        z = np.clip(1.0 - (u * r / _HALF_ZEROS) ** 2, 0.0, None)
        w = r * np.sinc(r * u) * (np.i0(_KAISER_BETA * np.sqrt(z)) / i0_beta)
        taps = xp[base[:, None] + offsets[None, :] + half]
        out[lo:hi] = np.sum(taps * w, axis=1)

    return AudioBuffer(np.clip(out, -1.0, 1.0), target_rate)
