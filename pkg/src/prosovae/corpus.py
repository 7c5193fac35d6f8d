"""Synthetic prosody corpus: phone/word structure with known F0, energy and
duration, rendered to harmonic waveforms and log-magnitude spectrograms.

Generation is a pure function of (config, seed).  Voiced phones are sums of
8 harmonics with 1/k amplitudes; unvoiced phones are band-limited noise.
Phones are cross-faded over one hop at their boundaries so pitch tracking is
not corrupted by clicks.  Waveform amplitudes are kept small so the
log(1+|.|) compression of the spectrogram stays in its near-linear regime.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

HARMONICS = 8
NOISE_BAND_HZ = (2000.0, 6000.0)
MAGIC = b"HVAC"
FORMAT_VERSION = 1


class CorpusError(ValueError):
    """Invalid corpus configuration or generation request."""


class CorpusFormatError(IOError):
    """Corpus file is corrupt, truncated, or has the wrong version."""


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 24
    vowel_ids: tuple[int, ...] = tuple(range(8))
    sample_rate: int = 24000
    frame_length: int = 512
    hop_length: int = 128
    fft_bins: int = 512
    f0_min: float = 200.0
    f0_max: float = 260.0
    energy_min: float = 0.25
    energy_max: float = 2.0
    duration_min: int = 3
    duration_max: int = 8
    words_min: int = 2
    words_max: int = 4
    phones_per_word_min: int = 1
    phones_per_word_max: int = 3
    amplitude: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.hop_length > self.frame_length:
            raise CorpusError("hop_length must not exceed frame_length")
        if self.fft_bins < self.frame_length:
            raise CorpusError("fft_bins must be >= frame_length")
        if not (0 < self.f0_min < self.f0_max):
            raise CorpusError("need 0 < f0_min < f0_max")
        if self.f0_max >= self.sample_rate / 4:
            raise CorpusError("f0_max must be below sample_rate/4")
        if not (0 < self.energy_min <= self.energy_max):
            raise CorpusError("bad energy range")
        if self.duration_min < 2 or self.duration_min > self.duration_max:
            raise CorpusError("need duration_max >= duration_min >= 2")
        if self.words_min < 1 or self.words_min > self.words_max:
            raise CorpusError("bad words range")
        if self.phones_per_word_min < 1 or self.phones_per_word_min > self.phones_per_word_max:
            raise CorpusError("bad phones-per-word range")
        if not self.vowel_ids or any(v < 0 or v >= self.vocab_size for v in self.vowel_ids):
            raise CorpusError("vowel_ids must be a nonempty subset of the vocabulary")

    @property
    def num_freq(self) -> int:
        return self.fft_bins // 2 + 1


@dataclass
class PhoneSpec:
    phone_id: int
    is_vowel: bool
    duration_frames: int
    f0_hz: float            # 0 for unvoiced phones
    energy_gain: float
    word_index: int


@dataclass
class Utterance:
    phones: list[PhoneSpec]
    word_map: np.ndarray        # (N,) phone index -> word index, nondecreasing
    waveform: np.ndarray        # (samples,)
    spectrogram: np.ndarray     # (T, F) log(1+|stft|)
    alignment: np.ndarray       # (T,) frame -> phone index

    @property
    def num_phones(self) -> int:
        return len(self.phones)

    @property
    def num_words(self) -> int:
        return int(self.word_map[-1]) + 1

    @property
    def num_frames(self) -> int:
        return self.spectrogram.shape[0]

    @property
    def phone_ids(self) -> np.ndarray:
        return np.array([p.phone_id for p in self.phones], dtype=np.int64)

    @property
    def durations(self) -> np.ndarray:
        return np.array([p.duration_frames for p in self.phones], dtype=np.int64)

    def frame_span(self, n: int) -> tuple[int, int]:
        """Half-open frame interval [n1, n2) owned by phone ``n``."""
        starts = np.concatenate([[0], np.cumsum(self.durations)])
        return int(starts[n]), int(starts[n + 1])


def generate_utterance(config: CorpusConfig, rng: np.random.Generator) -> Utterance:
    """Draw structure and attributes, then render waveform and spectrogram."""
    n_words = int(rng.integers(config.words_min, config.words_max + 1))
    phones: list[PhoneSpec] = []
    for w in range(n_words):
        n_phones = int(rng.integers(config.phones_per_word_min, config.phones_per_word_max + 1))
        for _ in range(n_phones):
            pid = int(rng.integers(0, config.vocab_size))
            is_vowel = pid in config.vowel_ids
            dur = int(rng.integers(config.duration_min, config.duration_max + 1))
            f0 = float(rng.uniform(config.f0_min, config.f0_max)) if is_vowel else 0.0
            gain = float(rng.uniform(config.energy_min, config.energy_max))
            phones.append(PhoneSpec(pid, is_vowel, dur, f0, gain, w))
    return render_utterance(phones, config, rng)


def render_utterance(phones: list[PhoneSpec], config: CorpusConfig,
                     rng: np.random.Generator) -> Utterance:
    """Render an explicit phone list (also used to build fixed carrier utterances)."""
    if not phones:
        raise CorpusError("utterance needs at least one phone")
    durations = np.array([p.duration_frames for p in phones], dtype=np.int64)
    word_map = np.array([p.word_index for p in phones], dtype=np.int64)
    if np.any(np.diff(word_map) < 0) or word_map[0] != 0 or np.any(np.diff(word_map) > 1):
        raise CorpusError("word indices must form a nondecreasing surjection from 0")
    total_frames = int(durations.sum())
    hop = config.hop_length
    n_samples = total_frames * hop + (config.frame_length - hop)
    starts = np.concatenate([[0], np.cumsum(durations)]) * hop
    starts[-1] = n_samples  # last phone absorbs the analysis tail

    waveform = np.zeros(n_samples)
    fade = hop
    for i, p in enumerate(phones):
        s, e = int(starts[i]), int(starts[i + 1])
        ws = max(0, s - fade // 2)
        we = min(n_samples, e + fade // 2)
        t = (np.arange(ws, we) - s) / config.sample_rate
        if p.is_vowel:
            sig = np.zeros(we - ws)
            for k in range(1, HARMONICS + 1):
                sig += (1.0 / k) * np.sin(2.0 * np.pi * k * p.f0_hz * t)
        else:
            sig = _band_noise(we - ws, config.sample_rate, rng)
        sig *= config.amplitude * p.energy_gain
        env = np.ones(we - ws)
        if s > 0:
            ramp = min(fade, we - ws)
            env[:ramp] = np.linspace(0.0, 1.0, ramp, endpoint=False)
        if e < n_samples:
            ramp = min(fade, we - ws)
            env[-ramp:] = np.minimum(env[-ramp:], np.linspace(1.0, 0.0, ramp, endpoint=False))
        waveform[ws:we] += sig * env

    spec = spectrogram(waveform, config)
    if spec.shape[0] != total_frames:
        raise CorpusError(f"frame count mismatch: {spec.shape[0]} != {total_frames}")
    alignment = np.repeat(np.arange(len(phones), dtype=np.int64), durations)
    return Utterance(phones, word_map, waveform, spec, alignment)


def _band_noise(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """White noise restricted to NOISE_BAND_HZ, unit-ish rms."""
    white = rng.standard_normal(n)
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum = np.fft.rfft(white)
    spectrum[(f < NOISE_BAND_HZ[0]) | (f > NOISE_BAND_HZ[1])] = 0.0
    out = np.fft.irfft(spectrum, n)
    rms = np.sqrt(np.mean(out * out))
    return out / max(rms, 1e-12)


def spectrogram(waveform: np.ndarray, config: CorpusConfig) -> np.ndarray:
    """T x F log-magnitude frames: log(1 + |rfft(hann * frame)|)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.size < config.frame_length:
        raise CorpusError(f"waveform too short: {x.size} < frame_length {config.frame_length}")
    hop, flen = config.hop_length, config.frame_length
    n_frames = 1 + (x.size - flen) // hop
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(flen) / flen)
    idx = np.arange(flen)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    mag = np.abs(np.fft.rfft(frames, n=config.fft_bins, axis=1))
    return np.log1p(mag)


def generate_corpus(config: CorpusConfig, count: int) -> list[Utterance]:
    """``count`` independent utterances; utterance i is seeded by (seed, i)."""
    if count < 1:
        raise CorpusError("count must be positive")
    return [generate_utterance(config, np.random.default_rng([config.seed, i]))
            for i in range(count)]


# ---------------------------------------------------------------------------
# container format: magic, u32 version, u32 count, then per utterance
# u32 N, u32 M, N phone records (u32 id, u8 vowel, u32 dur, f64 f0, f64 gain,
# u32 word), u64 wav length + f64 samples, u32 T, u32 F + f64 spectrogram
# (row-major), u32*T alignment.  Little-endian throughout.


def save_corpus(utterances: list[Utterance], path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(utterances)))
    for u in utterances:
        T, F = u.spectrogram.shape
        buf.write(struct.pack("<II", u.num_phones, u.num_words))
        for p in u.phones:
            buf.write(struct.pack("<IBIddI", p.phone_id, int(p.is_vowel),
                                  p.duration_frames, p.f0_hz, p.energy_gain, p.word_index))
        buf.write(struct.pack("<Q", u.waveform.size))
        buf.write(u.waveform.astype("<f8").tobytes())
        buf.write(struct.pack("<II", T, F))
        buf.write(u.spectrogram.astype("<f8").tobytes())
        buf.write(u.alignment.astype("<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise CorpusFormatError(f"truncated corpus file at offset {self.pos}")
        out = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return out

    def read_array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.blob):
            raise CorpusFormatError(f"truncated corpus file at offset {self.pos}")
        out = np.frombuffer(self.blob, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return out


def load_corpus(path) -> list[Utterance]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = bytes(r.read("<4s")[0])
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, count = r.read("<II")
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {version}, expected {FORMAT_VERSION}")
    utterances = []
    for _ in range(count):
        n_phones, n_words = r.read("<II")
        phones = []
        for _ in range(n_phones):
            pid, vowel, dur, f0, gain, widx = r.read("<IBIddI")
            phones.append(PhoneSpec(pid, bool(vowel), dur, f0, gain, widx))
        (wav_len,) = r.read("<Q")
        waveform = r.read_array("<f8", wav_len)
        T, F = r.read("<II")
        spec = r.read_array("<f8", T * F).reshape(T, F)
        alignment = r.read_array("<u4", T).astype(np.int64)
        word_map = np.array([p.word_index for p in phones], dtype=np.int64)
        if n_words != int(word_map[-1]) + 1:
            raise CorpusFormatError(f"word count mismatch at offset {r.pos}")
        utterances.append(Utterance(phones, word_map, waveform, spec, alignment))
    if r.pos != len(blob):
        raise CorpusFormatError(f"trailing bytes at offset {r.pos}")
    return utterances


def config_to_json(config: CorpusConfig) -> str:
    d = asdict(config)
    d["vowel_ids"] = list(d["vowel_ids"])
    return json.dumps(d, sort_keys=True)


def config_from_dict(d: dict) -> CorpusConfig:
    d = dict(d)
    if "vowel_ids" in d:
        d["vowel_ids"] = tuple(d["vowel_ids"])
    allowed = set(CorpusConfig.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
    return CorpusConfig(**d)
