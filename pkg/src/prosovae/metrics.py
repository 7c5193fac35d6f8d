"""Signal-level evaluation: YIN pitch tracking, F0 error metrics, MCD, and
per-phone attribute measurement (F0, energy, duration).

Two measurement domains are supported.  Corpus utterances are measured in
the waveform domain: duration from the frame alignment, energy from signal
magnitudes with a 50-sample margin excluded at each phone edge, F0 from a
YIN track.  Generated outputs have no waveform, so they are measured in the
spectrogram domain with the duration predictor supplying durations; the
same estimators are used for every model under comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CorpusConfig, Utterance

MARGIN_SAMPLES = 50
GPE_THRESHOLD = 0.2


class MetricError(ValueError):
    pass


@dataclass
class F0Track:
    f0_hz: np.ndarray    # (T,), 0 where unvoiced
    voiced: np.ndarray   # (T,) bool
    times: np.ndarray    # (T,) frame start times in seconds

    def __len__(self) -> int:
        return self.f0_hz.size


@dataclass
class F0ErrorReport:
    gpe: float | None    # None when no frames are voiced in both tracks
    vde: float
    ffe: float


@dataclass
class AttributeMeasurement:
    phone_index: int
    duration_frames: float
    energy_ratio: float
    mean_f0_hz: float | None
    mean_magnitude: float    # un-normalized energy, used for locality checks


# ---------------------------------------------------------------------------
# YIN


def yin_f0(window: np.ndarray, sample_rate: int, f0_min: float = 100.0,
           f0_max: float = 500.0, threshold: float = 0.1,
           energy_floor: float = 1e-6) -> float | None:
    """Single-window YIN estimate; returns None for unvoiced.

    Difference function d(tau), cumulative-mean-normalized d'(tau) with
    d'(0)=1, first lag dipping below ``threshold`` (descending to the local
    minimum), parabolic interpolation around the chosen lag.  A window is
    unvoiced when no dip crosses the threshold or its AC energy is below
    ``energy_floor``.
    """
    x = np.asarray(window, dtype=np.float64)
    tau_max = int(np.ceil(sample_rate / f0_min))
    tau_min = max(2, int(sample_rate / f0_max))
    if x.size < 2 * tau_max:
        raise MetricError(f"window of {x.size} samples too short; need >= {2 * tau_max}")

    w = x.size - tau_max
    head = x[:w]
    d = np.empty(tau_max + 1)
    d[0] = 0.0
    for tau in range(1, tau_max + 1):
        diff = head - x[tau:tau + w]
        d[tau] = float(diff @ diff)

    cum = np.cumsum(d[1:])
    dprime = np.ones(tau_max + 1)
    nonzero = cum > 0
    dprime[1:][nonzero] = d[1:][nonzero] * np.arange(1, tau_max + 1)[nonzero] / cum[nonzero]

    band = dprime[tau_min:tau_max + 1]
    below = np.nonzero(band < threshold)[0]
    if below.size:
        tau = tau_min + int(below[0])
        while tau + 1 <= tau_max and dprime[tau + 1] < dprime[tau]:
            tau += 1
    else:
        tau = tau_min + int(np.argmin(band))

    ac = x - x.mean()
    voiced = below.size > 0 and float(np.sqrt(np.mean(ac * ac))) >= energy_floor
    if not voiced:
        return None

    if 0 < tau < tau_max:
        a, b, c = dprime[tau - 1], dprime[tau], dprime[tau + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
        shift = float(np.clip(shift, -1.0, 1.0))
    else:
        shift = 0.0
    return sample_rate / (tau + shift)


def yin_track(waveform: np.ndarray, config: CorpusConfig, f0_min: float | None = None,
              f0_max: float | None = None, threshold: float = 0.1) -> F0Track:
    """Frame-synchronous YIN track using the corpus frame/hop layout."""
    f0_min = config.f0_min * 0.8 if f0_min is None else f0_min
    f0_max = config.f0_max * 1.25 if f0_max is None else f0_max
    x = np.asarray(waveform, dtype=np.float64)
    hop, flen = config.hop_length, config.frame_length
    n_frames = 1 + (x.size - flen) // hop
    f0 = np.zeros(n_frames)
    voiced = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        est = yin_f0(x[t * hop:t * hop + flen], config.sample_rate, f0_min, f0_max, threshold)
        if est is not None:
            f0[t] = est
            voiced[t] = True
    times = np.arange(n_frames) * hop / config.sample_rate
    return F0Track(f0, voiced, times)


# ---------------------------------------------------------------------------
# spectrogram-domain F0 (measures model output without a vocoder)


def f0_track_spec(log_spec: np.ndarray, config: CorpusConfig, f0_min: float | None = None,
                  f0_max: float | None = None, harmonic_ratio: float = 0.1,
                  magnitude_floor: float = 1e-6) -> F0Track:
    """Per-frame strongest peak in the F0 band with quadratic interpolation.

    Voicing requires the peak to clear ``magnitude_floor`` and a harmonic
    confirmation: magnitude near 2*f0 at least ``harmonic_ratio`` of the peak.
    """
    f0_min = config.f0_min * 0.8 if f0_min is None else f0_min
    f0_max = config.f0_max * 1.25 if f0_max is None else f0_max
    spec = np.asarray(log_spec, dtype=np.float64)
    T, F = spec.shape
    bin_width = config.sample_rate / config.fft_bins
    lo = max(1, int(np.ceil(f0_min / bin_width)))
    hi = min(F - 2, int(np.floor(f0_max / bin_width)))
    if hi <= lo:
        raise MetricError("F0 band empty at this spectral resolution")

    mag = np.expm1(np.maximum(spec, 0.0))
    f0 = np.zeros(T)
    voiced = np.zeros(T, dtype=bool)
    for t in range(T):
        band = mag[t, lo:hi + 1]
        b = lo + int(np.argmax(band))
        peak = mag[t, b]
        if peak < magnitude_floor:
            continue
        la, lb, lc = spec[t, b - 1], spec[t, b], spec[t, b + 1]
        denom = la - 2.0 * lb + lc
        shift = 0.5 * (la - lc) / denom if abs(denom) > 1e-12 else 0.0
        shift = float(np.clip(shift, -0.5, 0.5))
        est = (b + shift) * bin_width
        h2 = int(round(2.0 * est / bin_width))
        if h2 + 1 >= F:
            continue
        if mag[t, max(0, h2 - 1):h2 + 2].max() >= harmonic_ratio * peak:
            f0[t] = est
            voiced[t] = True
    times = np.arange(T) * config.hop_length / config.sample_rate
    return F0Track(f0, voiced, times)


# ---------------------------------------------------------------------------
# F0 error metrics


def f0_error_metrics(ref: F0Track, est: F0Track) -> F0ErrorReport:
    """GPE / VDE / FFE between two equal-length tracks."""
    if len(ref) != len(est):
        raise MetricError(f"track lengths differ: {len(ref)} vs {len(est)}")
    n = len(ref)
    if n == 0:
        raise MetricError("empty tracks")
    both = ref.voiced & est.voiced
    mismatch = ref.voiced != est.voiced
    pitch_err = both & (np.abs(est.f0_hz - ref.f0_hz) > GPE_THRESHOLD * ref.f0_hz)
    gpe = float(pitch_err.sum() / both.sum()) if both.any() else None
    vde = float(mismatch.sum() / n)
    ffe = float((mismatch | pitch_err).sum() / n)
    return F0ErrorReport(gpe, vde, ffe)


# ---------------------------------------------------------------------------
# MCD


def mel_filterbank(num_filters: int, fft_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the mel scale spanning 0 Hz to Nyquist."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    n_freq = fft_bins // 2 + 1
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), num_filters + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = hz_pts * fft_bins / sample_rate
    fb = np.zeros((num_filters, n_freq))
    for i in range(num_filters):
        left, center, right = bins[i], bins[i + 1], bins[i + 2]
        k = np.arange(n_freq)
        up = (k - left) / max(center - left, 1e-9)
        down = (right - k) / max(right - center, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_cepstra(log_spec: np.ndarray, config: CorpusConfig, num_filters: int = 40,
                num_coeffs: int = 13) -> np.ndarray:
    """(T, num_coeffs) cepstra c_1..c_n from a log(1+|.|) spectrogram; c_0 excluded."""
    mag = np.expm1(np.maximum(np.asarray(log_spec, dtype=np.float64), 0.0))
    fb = mel_filterbank(num_filters, config.fft_bins, config.sample_rate)
    logmel = np.log(mag ** 2 @ fb.T + 1e-10)
    j = np.arange(num_filters)
    k = np.arange(1, num_coeffs + 1)[:, None]
    dct = np.sqrt(2.0 / num_filters) * np.cos(np.pi * k * (j + 0.5) / num_filters)
    return logmel @ dct.T


def mcd_from_cepstra(ref: np.ndarray, est: np.ndarray) -> float:
    """Mean over frames of (10/ln10) * sqrt(2 * sum_d (c_d - c'_d)^2), in dB."""
    ref = np.atleast_2d(ref)
    est = np.atleast_2d(est)
    if ref.shape != est.shape:
        raise MetricError(f"cepstra shapes differ: {ref.shape} vs {est.shape}")
    diff = ref - est
    return float(np.mean((10.0 / np.log(10.0)) * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


def mcd13(ref_spec: np.ndarray, est_spec: np.ndarray, config: CorpusConfig,
          num_filters: int = 40) -> float:
    """MCD over the first 13 mel cepstral coefficients; no frame alignment."""
    if ref_spec.shape[0] != est_spec.shape[0]:
        raise MetricError(f"frame counts differ: {ref_spec.shape[0]} vs {est_spec.shape[0]}")
    return mcd_from_cepstra(mel_cepstra(ref_spec, config, num_filters),
                            mel_cepstra(est_spec, config, num_filters))


# ---------------------------------------------------------------------------
# per-phone attribute measurement


def _span_energy(abs_wave: np.ndarray, t1: int, t2: int) -> float:
    """Mean magnitude over [t1, t2), excluding 50-sample margins when the span
    exceeds 101 samples (otherwise the full span is used)."""
    if t2 - t1 > 2 * MARGIN_SAMPLES + 1:
        t1, t2 = t1 + MARGIN_SAMPLES, t2 - MARGIN_SAMPLES
    return float(abs_wave[t1:t2].mean())


def measure_phone(utt: Utterance, phone_index: int, config: CorpusConfig,
                  track: F0Track | None = None) -> AttributeMeasurement:
    """Waveform-domain measurement for a corpus utterance phone."""
    if not 0 <= phone_index < utt.num_phones:
        raise MetricError(f"phone index {phone_index} out of range")
    if track is None:
        track = yin_track(utt.waveform, config)
    n1, n2 = utt.frame_span(phone_index)
    hop = config.hop_length
    t1, t2 = n1 * hop, n2 * hop
    abs_wave = np.abs(utt.waveform)
    mean_mag = _span_energy(abs_wave, t1, t2)
    energy = mean_mag / max(float(abs_wave.mean()), 1e-12)
    vmask = track.voiced[n1:n2]
    f0 = float(track.f0_hz[n1:n2][vmask].mean()) if vmask.any() else None
    return AttributeMeasurement(phone_index, float(n2 - n1), energy, f0, mean_mag)


def measure_utterance(utt: Utterance, config: CorpusConfig) -> list[AttributeMeasurement]:
    track = yin_track(utt.waveform, config)
    return [measure_phone(utt, n, config, track) for n in range(utt.num_phones)]


def measure_generated_phone(frames: np.ndarray, frame_offsets: np.ndarray,
                            durations: np.ndarray, phone_index: int,
                            config: CorpusConfig,
                            track: F0Track | None = None) -> AttributeMeasurement:
    """Spectrogram-domain measurement for generated output.

    ``frames`` is the generated (T, F) log-magnitude spectrogram,
    ``frame_offsets`` the (N+1,) frame boundaries from the rounded predicted
    durations, and ``durations`` the raw predictor outputs which serve as the
    measured duration.
    """
    if track is None:
        track = f0_track_spec(frames, config)
    n1, n2 = int(frame_offsets[phone_index]), int(frame_offsets[phone_index + 1])
    mag = np.expm1(np.maximum(frames, 0.0))
    frame_means = mag.mean(axis=1)
    mean_mag = float(frame_means[n1:n2].mean()) if n2 > n1 else 0.0
    energy = mean_mag / max(float(frame_means.mean()), 1e-12)
    vmask = track.voiced[n1:n2]
    f0 = float(track.f0_hz[n1:n2][vmask].mean()) if vmask.any() else None
    return AttributeMeasurement(phone_index, float(durations[phone_index]), energy, f0, mean_mag)
