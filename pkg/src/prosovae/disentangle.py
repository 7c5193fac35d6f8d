"""Latent traversal sweeps and the variance-ratio disentanglement protocol.

The protocol measures how exclusively each latent dimension controls one
prosody attribute.  For each dimension, values are drawn from a standard
Gaussian while the other dimensions stay at zero; the decoded vowel's F0,
energy and duration are measured; and each attribute's standard deviation is
scaled by its deviation under joint sampling of all dimensions so the three
attributes lie in a similar range.  The per-dimension score is the ratio of
the largest scaled deviation to the second largest, and the per-seed score
is the sum over dimensions.  Both the protocol and the traversal sweep work
through an attribute-sampler callable, so they can be validated on
constructed generators with known disentanglement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .corpus import CorpusConfig, Utterance
from .metrics import AttributeMeasurement, f0_track_spec, measure_generated_phone
from .model import HierarchicalVAE

ATTRIBUTES = ("f0", "energy", "duration")


class DisentangleError(ValueError):
    pass


@dataclass
class TraversalResult:
    level: str
    dim: int
    values: np.ndarray
    measurements: list[AttributeMeasurement]          # target phone, one per value
    word_measurements: list[list[AttributeMeasurement]]  # phones of the target word (word level)
    context: str

    def attribute(self, name: str) -> np.ndarray:
        """Measured attribute as an array over the grid; NaN where absent."""
        idx = {"f0": "mean_f0_hz", "energy": "energy_ratio", "duration": "duration_frames"}[name]
        vals = [getattr(m, idx) for m in self.measurements]
        return np.array([np.nan if v is None else v for v in vals], dtype=np.float64)


@dataclass
class DimensionStats:
    dim: int
    scaled_stds: dict            # attribute -> scaled std
    controlled: str              # attribute with the largest scaled std
    ratio: float | None          # largest / second-largest; None when degenerate


@dataclass
class SeedResult:
    seed: int
    dims: list[DimensionStats]
    summed_ratio: float

    def dominant(self, dim: int) -> str:
        return self.dims[dim].controlled


@dataclass
class DisentanglementReport:
    n_samples: int
    n_seeds: int
    seeds: list[SeedResult]
    mean: float
    std: float
    scaling: str = "per-attribute std under joint sampling of all dimensions"

    @property
    def per_seed_sums(self) -> list[float]:
        return [s.summed_ratio for s in self.seeds]


def linear_fit_r2(x: np.ndarray, y: np.ndarray) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    mask = np.isfinite(y)
    x, y = x[mask], y[mask]
    if x.size < 3 or np.ptp(y) == 0:
        return 0.0
    coeffs = np.polyfit(x, y, 1)
    resid = y - np.polyval(coeffs, x)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0


# ---------------------------------------------------------------------------
# model-backed attribute samplers


def make_phone_sampler(model: HierarchicalVAE, carrier: Utterance, vowel_index: int,
                       config: CorpusConfig):
    """Callable z -> (f0, energy, duration) decoding the carrier with the
    target vowel's phone latent set to z and every other latent at zero."""
    d = model.config.d_p
    n = carrier.num_phones

    def sample(z: np.ndarray) -> tuple[float, float, float]:
        z_phone = np.zeros((n, d))
        z_phone[vowel_index] = z
        gen = model.generate(carrier.phone_ids, carrier.word_map, z_phone=z_phone)
        meas = measure_generated_phone(gen.frames, gen.frame_offsets, gen.durations,
                                       vowel_index, config)
        f0 = np.nan if meas.mean_f0_hz is None else meas.mean_f0_hz
        return f0, meas.energy_ratio, meas.duration_frames

    return sample


def select_carrier(corpus: list[Utterance]) -> tuple[Utterance, int]:
    """A fixed carrier utterance and the index of its longest vowel."""
    best = None
    for utt in corpus:
        for i, p in enumerate(utt.phones):
            if p.is_vowel and (best is None or p.duration_frames > best[2]):
                if utt.num_words >= 2:
                    best = (utt, i, p.duration_frames)
    if best is None:
        raise DisentangleError("corpus contains no vowel in a multi-word utterance")
    return best[0], best[1]


# ---------------------------------------------------------------------------
# traversal


def traverse(model: HierarchicalVAE, carrier: Utterance, level: str, dim: int,
             values: np.ndarray, target_index: int, config: CorpusConfig,
             fixed_latents: dict | None = None) -> TraversalResult:
    """Sweep one latent dimension of one unit, measuring the target phone.

    For word-level sweeps the target is a word index and every phone of that
    word is measured as well.  All other latents stay at ``fixed_latents``
    (zero, i.e. neutral prosody, by default).
    """
    values = np.asarray(values, dtype=np.float64)
    if np.any(np.diff(values) <= 0):
        raise DisentangleError("traversal grid must be strictly increasing")
    cfg = model.config
    d = cfg.latent_dims(level)
    if not 0 <= dim < d:
        raise DisentangleError(f"dim {dim} out of range for {level} level ({d} dims)")
    n, m = carrier.num_phones, carrier.num_words
    fixed = fixed_latents or {}
    base_p = np.array(fixed.get("phone", np.zeros((n, cfg.d_p))), dtype=np.float64)
    base_w = np.array(fixed.get("word", np.zeros((m, cfg.d_w))), dtype=np.float64)
    base_u = np.array(fixed.get("utt", np.zeros(cfg.d_u)), dtype=np.float64)

    if level == "phone":
        phone_target = target_index
        word_phones = []
    elif level == "word":
        phone_target = int(np.nonzero(carrier.word_map == target_index)[0][0])
        word_phones = [int(i) for i in np.nonzero(carrier.word_map == target_index)[0]]
    elif level == "utt":
        phone_target = target_index
        word_phones = []
    else:
        raise DisentangleError(f"unknown level {level!r}")

    measurements, word_measurements = [], []
    for v in values:
        z_p, z_w, z_u = base_p.copy(), base_w.copy(), base_u.copy()
        if level == "phone":
            z_p[target_index, dim] = v
        elif level == "word":
            z_w[target_index, dim] = v
        else:
            z_u[dim] = v
        gen = model.generate(carrier.phone_ids, carrier.word_map, z_phone=z_p, z_word=z_w,
                             z_utt=z_u if cfg.d_u else None)
        track = f0_track_spec(gen.frames, config)
        measurements.append(measure_generated_phone(gen.frames, gen.frame_offsets,
                                                    gen.durations, phone_target, config, track))
        word_measurements.append([
            measure_generated_phone(gen.frames, gen.frame_offsets, gen.durations, i, config, track)
            for i in word_phones])
    context = f"carrier N={n} M={m}, target {level} {target_index}, others at zero"
    return TraversalResult(level, dim, values, measurements, word_measurements, context)


def traversal_to_csv(result: TraversalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "value", "f0", "energy", "duration"])
        for v, m in zip(result.values, result.measurements):
            f0 = "" if m.mean_f0_hz is None else repr(m.mean_f0_hz)
            w.writerow([result.dim, repr(float(v)), f0, repr(m.energy_ratio),
                        repr(m.duration_frames)])


# ---------------------------------------------------------------------------
# variance-ratio protocol


def _attribute_stds(samples: np.ndarray) -> np.ndarray:
    """Per-attribute std over protocol samples, ignoring absent (NaN) values."""
    out = np.zeros(samples.shape[1])
    for a in range(samples.shape[1]):
        col = samples[:, a]
        col = col[np.isfinite(col)]
        out[a] = col.std() if col.size >= 2 else 0.0
    return out


def variance_ratio(sampler, d: int, n_samples: int = 100, n_seeds: int = 5,
                   base_seed: int = 0) -> DisentanglementReport:
    """Run the variance-ratio protocol against an attribute sampler.

    ``sampler`` maps a (d,) latent vector to an (f0, energy, duration) triple
    (NaN marks an absent measurement).  Per seed, each dimension is sampled
    ``n_samples`` times with the others at zero; scaled per-attribute stds
    give the per-dimension ratio, and ratios sum to the seed score.
    """
    seeds = []
    for s in range(n_seeds):
        rng = np.random.default_rng([base_seed, s])
        joint = np.empty((n_samples, 3))
        draws = rng.standard_normal((n_samples, d))
        for i in range(n_samples):
            joint[i] = sampler(draws[i])
        joint_std = _attribute_stds(joint)
        if np.any(joint_std <= 0):
            degenerate = [ATTRIBUTES[a] for a in np.nonzero(joint_std <= 0)[0]]
            raise DisentangleError(f"joint sampling left attributes constant: {degenerate}")

        dims = []
        total = 0.0
        for k in range(d):
            vals = np.empty((n_samples, 3))
            zk = rng.standard_normal(n_samples)
            for i in range(n_samples):
                z = np.zeros(d)
                z[k] = zk[i]
                vals[i] = sampler(z)
            scaled = _attribute_stds(vals) / joint_std
            order = np.argsort(scaled)[::-1]
            controlled = ATTRIBUTES[order[0]]
            second = scaled[order[1]]
            ratio = float(scaled[order[0]] / second) if second > 0 else None
            dims.append(DimensionStats(k, dict(zip(ATTRIBUTES, scaled.tolist())),
                                       controlled, ratio))
            if ratio is not None:
                total += ratio
        seeds.append(SeedResult(s, dims, total))
    sums = np.array([s.summed_ratio for s in seeds])
    std = float(sums.std(ddof=1)) if n_seeds > 1 else 0.0
    return DisentanglementReport(n_samples, n_seeds, seeds, float(sums.mean()), std)


def report_to_csv(report: DisentanglementReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "dim", "controlled", "ratio", "scaled_f0", "scaled_energy",
                    "scaled_duration", "summed_ratio"])
        for s in report.seeds:
            for dim in s.dims:
                w.writerow([s.seed, dim.dim, dim.controlled,
                            "" if dim.ratio is None else repr(dim.ratio),
                            repr(dim.scaled_stds["f0"]), repr(dim.scaled_stds["energy"]),
                            repr(dim.scaled_stds["duration"]), repr(s.summed_ratio)])


def format_ratio_table(rows: list[tuple[str, DisentanglementReport | None]]) -> str:
    """Text table of average variance ratios; None marks an empty comparison slot."""
    width = max(len(name) for name, _ in rows)
    lines = [f"{'Model':<{width}}  Average variance ratio",
             "-" * (width + 25)]
    for name, report in rows:
        if report is None:
            lines.append(f"{name:<{width}}  (not implemented)")
        else:
            lines.append(f"{name:<{width}}  {report.mean:.2f} +/- {report.std:.2f}")
    return "\n".join(lines)
