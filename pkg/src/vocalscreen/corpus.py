"""Corpus handling: manifests, stratified folds, fragment sampling, synthesis.

A manifest is a CSV with columns speaker_id, audio_path, phq8.  A speaker
may own several recordings (several rows); the binary label is 1 iff
phq8 >= 10.  Folds are assigned per speaker, stratified by label, so no
speaker's fragments ever appear on both sides of a split.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import load_wav, resample, write_wav, AudioBuffer
from .features import (
    FrameSpec,
    build_mel_filterbank,
    fragment_stack,
    load_fragment_stack,
    melspectrogram_db,
    save_fragment_stack,
)

LABEL_THRESHOLD = 10  # phq8 >= 10 counts as the positive class
MIN_DURATION_S = 3.0


class ManifestError(ValueError):
    """Base class for malformed manifests."""


class MissingColumnError(ManifestError):
    pass


class Phq8OutOfRangeError(ManifestError):
    pass


class DuplicatePathError(ManifestError):
    pass


class TooFewSpeakersError(ValueError):
    pass


class NoFragmentsError(ValueError):
    pass


@dataclass
class SpeakerRecord:
    speaker_id: str
    phq8: int
    label: int
    audio_paths: list[str]
    # (path, start_frame) pairs, pooled over the speaker's recordings;
    # filled in lazily by CorpusIndex.
    fragment_index: list[tuple[str, int]] | None = None


def load_manifest(path) -> list[SpeakerRecord]:
    """Parse a manifest CSV into one record per speaker.

    Relative audio paths are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    records: dict[str, SpeakerRecord] = {}
    seen_paths: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("speaker_id", "audio_path", "phq8"):
            if col not in header:
                raise MissingColumnError(f"{path}: missing column {col!r}")
        for i, row in enumerate(reader, start=2):
            sid = (row["speaker_id"] or "").strip()
            rel = (row["audio_path"] or "").strip()
            if not sid or not rel:
                raise ManifestError(f"{path}:{i}: empty speaker_id or audio_path")
            try:
                phq8 = int(row["phq8"])
            except (TypeError, ValueError):
                raise Phq8OutOfRangeError(f"{path}:{i}: phq8 {row['phq8']!r} is not an integer")
            if not 0 <= phq8 <= 24:
                raise Phq8OutOfRangeError(f"{path}:{i}: phq8 {phq8} outside [0, 24]")
            apath = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if apath in seen_paths:
                raise DuplicatePathError(f"{path}:{i}: duplicate audio path {rel!r}")
            seen_paths.add(apath)
            rec = records.get(sid)
            if rec is None:
                records[sid] = SpeakerRecord(
                    speaker_id=sid,
                    phq8=phq8,
                    label=int(phq8 >= LABEL_THRESHOLD),
                    audio_paths=[apath],
                )
            else:
                if rec.phq8 != phq8:
                    raise ManifestError(
                        f"{path}:{i}: speaker {sid!r} has conflicting phq8 values"
                    )
                rec.audio_paths.append(apath)
    if not records:
        raise ManifestError(f"{path}: no rows")
    return list(records.values())


@dataclass
class FoldPlan:
    """Speaker-level fold assignment: speaker_id -> fold in [0, k)."""

    k: int
    seed: int
    assignment: dict[str, int]

    def fold_of(self, speaker_id: str) -> int:
        return self.assignment[speaker_id]

    def speakers_in(self, fold: int) -> list[str]:
        return [s for s, f in self.assignment.items() if f == fold]

    def split(self, records, fold):
        """(train_records, val_records) for one held-out fold."""
        train = [r for r in records if self.assignment[r.speaker_id] != fold]
        val = [r for r in records if self.assignment[r.speaker_id] == fold]
        return train, val

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {"k": self.k, "seed": self.seed, "assignment": self.assignment},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "FoldPlan":
        with open(path) as fh:
            raw = json.load(fh)
        return FoldPlan(k=raw["k"], seed=raw["seed"],
                        assignment={s: int(f) for s, f in raw["assignment"].items()})


def make_folds(records, k: int = 3, seed: int = 0) -> FoldPlan:
    """Stratified speaker-level folds.

    Each class is shuffled (seeded) and dealt round-robin; the deal
    pointer carries over between classes so both the per-class and the
    total fold sizes differ by at most one.
    """
    pos = sorted(r.speaker_id for r in records if r.label == 1)
    neg = sorted(r.speaker_id for r in records if r.label == 0)
    if min(len(pos), len(neg)) < k:
        raise TooFewSpeakersError(
            f"need at least {k} speakers per class, got {len(pos)} pos / {len(neg)} neg"
        )
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    ptr = 0
    for group in (pos, neg):
        order = rng.permutation(len(group))
        for j in order:
            assignment[group[j]] = ptr % k
            ptr += 1
    return FoldPlan(k=k, seed=seed, assignment=assignment)


@dataclass
class FragmentBatch:
    """A sampled bag of fragments for one speaker."""

    speaker_id: str
    label: int
    values: np.ndarray  # (n, 128, 16) float32, in draw order
    origins: list[tuple[str, int]]


class CorpusIndex:
    """Materializes fragments for a set of speaker records.

    Fragment stacks are memoized in memory per audio path and optionally
    persisted to ``cache_dir``; recordings shorter than MIN_DURATION_S
    after decoding contribute nothing.
    """

    def __init__(self, records, spec: FrameSpec = FrameSpec(), cache_dir=None):
        self.records = list(records)
        self.spec = spec
        self.cache_dir = cache_dir
        self._filterbank = build_mel_filterbank(spec)
        self._stacks: dict[str, np.ndarray] = {}
        self._indexed = False

    def _cache_path(self, audio_path):
        import hashlib

        digest = hashlib.sha256(
            f"{os.path.abspath(audio_path)}|{self.spec}".encode()
        ).hexdigest()[:24]
        return os.path.join(self.cache_dir, digest + ".melfrag")

    def fragments_for(self, audio_path) -> np.ndarray:
        """(count, n_mels, width) stack for one recording (may be empty)."""
        stack = self._stacks.get(audio_path)
        if stack is not None:
            return stack
        cpath = self._cache_path(audio_path) if self.cache_dir else None
        if cpath and os.path.exists(cpath):
            stack = load_fragment_stack(cpath)
        else:
            buf = load_wav(audio_path)
            buf = resample(buf, self.spec.sample_rate)
            if buf.duration_s < MIN_DURATION_S:
                stack = np.zeros((0, self.spec.n_mels, self.spec.fragment_width),
                                 dtype=np.float32)
            else:
                mel_db = melspectrogram_db(buf.samples, self.spec, self._filterbank)
                stack = fragment_stack(mel_db, self.spec)
            if cpath:
                os.makedirs(self.cache_dir, exist_ok=True)
                save_fragment_stack(cpath, stack)
        self._stacks[audio_path] = stack
        return stack

    def build(self) -> "CorpusIndex":
        """Populate every record's fragment index."""
        if self._indexed:
            return self
        for rec in self.records:
            index = []
            for path in rec.audio_paths:
                n = self.fragments_for(path).shape[0]
                index.extend((path, start) for start in range(n))
            rec.fragment_index = index
        self._indexed = True
        return self

    def pool_size(self, rec: SpeakerRecord) -> int:
        if rec.fragment_index is None:
            self.build()
        return len(rec.fragment_index)

    def sample_fragments(self, rec: SpeakerRecord, n: int,
                         rng: np.random.Generator) -> FragmentBatch:
        """Draw n fragments uniformly from the speaker's pool.

        Without replacement when the pool is at least n deep, with
        replacement otherwise.
        """
        if rec.fragment_index is None:
            self.build()
        pool = rec.fragment_index
        if not pool:
            raise NoFragmentsError(f"speaker {rec.speaker_id!r} has no usable fragments")
        idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
        values = np.empty((n, self.spec.n_mels, self.spec.fragment_width),
                          dtype=np.float32)
        origins = []
        for j, i in enumerate(idx):
            path, start = pool[int(i)]
            values[j] = self.fragments_for(path)[start]
            origins.append((path, start))
        return FragmentBatch(speaker_id=rec.speaker_id, label=rec.label,
                             values=values, origins=origins)

    def labels(self) -> dict[str, int]:
        return {r.speaker_id: r.label for r in self.records}

    def fingerprint(self) -> str:
        """Content identity of the corpus, stable across directories.

        Hashes speaker ids, scores, and recording basenames so the same
        corpus materialized under two roots fingerprints identically.
        """
        import hashlib

        h = hashlib.sha256()
        for rec in sorted(self.records, key=lambda r: r.speaker_id):
            names = ",".join(sorted(os.path.basename(p) for p in rec.audio_paths))
            h.update(f"{rec.speaker_id}|{rec.phq8}|{names};".encode())
        return h.hexdigest()[:16]


# --- synthetic corpus -------------------------------------------------------

MARKER_KINDS = ("band", "paired")

# mel-band separation of the paired ridges: wider than any encoder
# kernel's receptive field, so only sequence models can bind the pair
PAIRED_GAP = 12


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the built-in synthetic voice-like corpus.

    Depressed speakers carry an injected acoustic marker in a fraction of
    62.5 ms frames.  ``band`` adds ``marker_gain_db`` of narrowband
    energy inside ``marker_band`` (a mel band index range).  ``paired``
    gives every frame two equal tonal ridges; marked frames space them
    exactly PAIRED_GAP mel bands apart while unmarked frames draw a wider
    spacing, so the cue is the distance between co-occurring ridges along
    the frequency axis, not tone count, energy, or band placement.
    """

    n_speakers: int = 60
    depressed_fraction: float = 0.30
    duration_s: tuple[float, float] = (4.0, 7.0)
    sample_rate: int = 16000
    marker_band: tuple[int, int] = (64, 80)
    marker_prevalence: float = 0.5
    marker_kind: str = "band"
    marker_gain_db: float = 36.0
    seed: int = 0

    def n_depressed(self) -> int:
        return int(round(self.n_speakers * self.depressed_fraction))


def _pink_noise(rng, n):
    white = rng.normal(size=n)
    spectrum = np.fft.rfft(white)
    f = np.arange(len(spectrum), dtype=np.float64)
    f[0] = 1.0
    spectrum /= np.sqrt(f)
    x = np.fft.irfft(spectrum, n=n)
    return x / (np.std(x) + 1e-12)


def _voice_base(rng, n, sr):
    """Harmonic stack with a wandering f0, syllabic envelope, pink floor."""
    ctrl_hop = max(1, sr // 20)
    n_ctrl = n // ctrl_hop + 2
    f0_ctrl = 150.0 * np.exp(np.cumsum(rng.normal(0.0, 0.04, n_ctrl)))
    f0_ctrl = np.clip(f0_ctrl, 100.0, 240.0)
    f0 = np.interp(np.arange(n), np.arange(n_ctrl) * ctrl_hop, f0_ctrl)
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    voiced = np.zeros(n)
    for h in range(1, 9):
        voiced += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / (h * h)
    env_ctrl = np.clip(rng.normal(0.7, 0.25, n_ctrl), 0.1, 1.2)
    env = np.interp(np.arange(n), np.arange(n_ctrl) * ctrl_hop, env_ctrl)
    x = env * voiced + 0.25 * _pink_noise(rng, n)
    return 0.08 * x / (np.sqrt(np.mean(x**2)) + 1e-12)


def _band_limit(x, sr, lo_hz, hi_hz):
    spectrum = np.fft.rfft(x)
    f = np.arange(len(spectrum)) * sr / len(x)
    spectrum[(f < lo_hz) | (f > hi_hz)] = 0.0
    return np.fft.irfft(spectrum, n=len(x))


def _frame_ramp(width, sr):
    edge = max(2, int(0.005 * sr))
    ramp = np.ones(width)
    up = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    ramp[:edge] = up
    ramp[-edge:] = up[::-1]
    return ramp


def synth_corpus(spec: SynthSpec, out_dir) -> str:
    """Generate WAV files plus manifest.csv; returns the manifest path.

    Fully deterministic given ``spec`` (byte-identical output files).
    """
    if spec.marker_kind not in MARKER_KINDS:
        raise ValueError(f"unknown marker_kind {spec.marker_kind!r}")
    os.makedirs(out_dir, exist_ok=True)
    frame_spec = FrameSpec()
    edges = build_mel_filterbank(frame_spec).band_edges_hz
    lo_band, hi_band = spec.marker_band
    band_lo_hz = float(edges[lo_band])
    band_hi_hz = float(edges[hi_band + 2])

    n_dep = spec.n_depressed()
    rows = []
    for i in range(spec.n_speakers):
        rng = np.random.default_rng([spec.seed, i])
        depressed = i < n_dep
        phq8 = int(rng.integers(10, 25)) if depressed else int(rng.integers(0, 10))
        dur = rng.uniform(*spec.duration_s)
        n = int(round(dur * spec.sample_rate))
        x = _voice_base(rng, n, spec.sample_rate)

        # one marker decision per 62.5 ms frame (the analysis hop)
        frame_len = int(round(spec.sample_rate * frame_spec.hop / frame_spec.sample_rate))
        n_frames = n // frame_len
        ramp = _frame_ramp(frame_len, spec.sample_rate)

        if spec.marker_kind == "band":
            if depressed and spec.marker_prevalence > 0:
                marked = rng.random(n_frames) < spec.marker_prevalence
                band_rms2 = np.mean(
                    _band_limit(x, spec.sample_rate, band_lo_hz, band_hi_hz) ** 2
                )
                band_rms2 = max(band_rms2, 1e-10)
                target = band_rms2 * (10.0 ** (spec.marker_gain_db / 10.0) - 1.0)
                noise = _band_limit(rng.normal(size=n), spec.sample_rate,
                                    band_lo_hz, band_hi_hz)
                noise *= np.sqrt(target / (np.mean(noise**2) + 1e-12))
                for fidx in np.flatnonzero(marked):
                    s = fidx * frame_len
                    x[s : s + frame_len] += noise[s : s + frame_len] * ramp
        else:  # paired: co-occurrence cue along the frequency axis
            amp = 10.0 ** (spec.marker_gain_db / 20.0) * np.sqrt(np.mean(x**2))
            a = amp / np.sqrt(2.0)
            t = np.arange(frame_len) / spec.sample_rate
            for fidx in range(n_frames):
                s = fidx * frame_len
                pair = depressed and rng.random() < spec.marker_prevalence
                # every frame carries exactly two equal ridges; only their
                # separation distinguishes the classes, so tone count,
                # amplitude, and local windows narrower than PAIRED_GAP
                # are uninformative
                gap = PAIRED_GAP if pair else int(rng.integers(2 * PAIRED_GAP,
                                                               4 * PAIRED_GAP + 1))
                base = int(rng.integers(10, 123 - gap))
                for b in (base, base + gap):
                    f_hz = float(edges[b + 1])
                    x[s : s + frame_len] += (
                        a * np.sin(2 * np.pi * f_hz * t + rng.uniform(0, 2 * np.pi)) * ramp
                    )

        peak = np.max(np.abs(x))
        if peak > 0.99:
            x *= 0.99 / peak
        sid = f"spk{i:03d}"
        wav_name = f"{sid}.wav"
        write_wav(os.path.join(out_dir, wav_name),
                  AudioBuffer(x, spec.sample_rate), "pcm16")
        rows.append((sid, wav_name, phq8))

    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["speaker_id", "audio_path", "phq8"])
        writer.writerows(rows)
    return manifest_path
