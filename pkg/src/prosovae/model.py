"""Hierarchical conditional VAE over phone / word / utterance latents.

Encoder side: the target spectrogram is pooled to phone features through the
oracle frame alignment, then to word features through the phone-word map.
Each level runs a recurrent conditional encoder that extracts latent
dimensions one at a time: the input for dimension k is the level features,
the conditioning samples from coarser levels, and the summed projections of
the previously sampled dimensions, which makes the posterior auto-regressive
across dimensions.  Word latents condition the phone encoder; an optional
utterance latent conditions both.

Decoder side: each phone's embedding is concatenated with the projected
latents of its phone, word, and utterance units.  A duration predictor emits
softplus-positive frame counts and a frame decoder renders each phone's
frames from the conditioned vector plus a normalized intra-phone position.
Training teacher-forces the ground-truth durations so the reconstruction is
frame-aligned with the target.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .corpus import CorpusConfig, Utterance

CHECKPOINT_MAGIC = b"HVCK"
CHECKPOINT_VERSION = 1
MAX_GENERATED_FRAMES_PER_PHONE = 64

LEVELS = ("utt", "word", "phone")


class ModelError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 24
    num_freq: int = 257
    phone_embed_dim: int = 8
    hidden_dim: int = 64
    d_p: int = 3
    d_w: int = 3
    d_u: int = 0
    proj_dim: int = 16
    beta1: float = 0.02          # phone KL weight
    beta2: float = 0.02          # word KL weight
    beta3: float = 0.02          # utterance KL weight
    autoregressive: bool = True  # False: independent per-dimension posterior baseline
    schedule_phone: bool = True
    schedule_word: bool = True
    schedule_utt: bool = False
    duration_loss_weight: float = 0.1
    duration_bias: float = 5.5

    def __post_init__(self):
        if min(self.phone_embed_dim, self.hidden_dim, self.proj_dim,
               self.d_p, self.d_w) <= 0 or self.d_u < 0:
            raise ModelError("latent and layer sizes must be positive (d_u may be 0)")
        if min(self.beta1, self.beta2, self.beta3) < 0:
            raise ModelError("KL weights must be nonnegative")

    @classmethod
    def for_corpus(cls, corpus_config: CorpusConfig, **overrides) -> "ModelConfig":
        mean_dur = 0.5 * (corpus_config.duration_min + corpus_config.duration_max)
        base = dict(vocab_size=corpus_config.vocab_size, num_freq=corpus_config.num_freq,
                    duration_bias=float(mean_dur))
        base.update(overrides)
        return cls(**base)

    def latent_dims(self, level: str) -> int:
        return {"utt": self.d_u, "word": self.d_w, "phone": self.d_p}[level]

    def encoder_input_dim(self, level: str) -> int:
        cond = {"utt": 0, "word": self.d_u, "phone": self.d_w + self.d_u}[level]
        return self.num_freq + cond + self.proj_dim

    @property
    def decoder_cond_dim(self) -> int:
        return self.phone_embed_dim + 2 * self.proj_dim + (self.proj_dim if self.d_u else 0)


def config_from_dict(d: dict) -> ModelConfig:
    allowed = set(ModelConfig.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ModelError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# pooling


def pool_frames_to_phones(spectrogram: np.ndarray, alignment: np.ndarray) -> np.ndarray:
    """Row n is the mean of the frames assigned to phone n."""
    alignment = np.asarray(alignment)
    if alignment.shape[0] != spectrogram.shape[0]:
        raise ModelError("alignment must cover every frame")
    n_phones = int(alignment.max()) + 1
    out = np.zeros((n_phones, spectrogram.shape[1]))
    for n in range(n_phones):
        rows = spectrogram[alignment == n]
        if rows.shape[0] == 0:
            raise ModelError(f"phone {n} owns no frames")
        out[n] = rows.mean(axis=0)
    return out


def pool_phones_to_words(phone_features: np.ndarray, word_map: np.ndarray) -> np.ndarray:
    """Row m is the mean of the phone rows with word_map == m."""
    word_map = np.asarray(word_map)
    if word_map.shape[0] != phone_features.shape[0]:
        raise ModelError("word map must cover every phone")
    if np.any(np.diff(word_map) < 0):
        raise ModelError("word map must be nondecreasing")
    n_words = int(word_map.max()) + 1
    out = np.zeros((n_words, phone_features.shape[1]))
    for m in range(n_words):
        rows = phone_features[word_map == m]
        if rows.shape[0] == 0:
            raise ModelError(f"word {m} owns no phones")
        out[m] = rows.mean(axis=0)
    return out


def gather_matrix(word_map: np.ndarray, n_words: int) -> np.ndarray:
    """(N, M) selection matrix: row n picks word word_map[n]."""
    g = np.zeros((len(word_map), n_words))
    g[np.arange(len(word_map)), word_map] = 1.0
    return g


def reparameterize(mu: Tensor, log_sigma: Tensor, eps) -> Tensor:
    """z = mu + exp(log_sigma) * eps, with eps supplied externally."""
    return mu + dc.exp(log_sigma) * dc.tensor(eps)


# ---------------------------------------------------------------------------
# posterior containers


@dataclass
class PosteriorStep:
    mu: float
    log_sigma: float
    sample: float


@dataclass
class LevelPosterior:
    samples: np.ndarray    # (units, d)
    mu: np.ndarray
    log_sigma: np.ndarray

    def step(self, unit: int, dim: int) -> PosteriorStep:
        return PosteriorStep(float(self.mu[unit, dim]), float(self.log_sigma[unit, dim]),
                             float(self.samples[unit, dim]))


@dataclass
class LatentHierarchy:
    utt: LevelPosterior
    word: LevelPosterior
    phone: LevelPosterior

    def level(self, name: str) -> LevelPosterior:
        return getattr(self, name)


@dataclass
class EncodeResult:
    """Graph-side products of one level's conditional encoder."""
    sample_matrix: Tensor          # (units, d); zero columns for inactive dims
    projection: Tensor             # (units, proj_dim) summed projection of all dims
    kl_columns: list               # per-dim (units, 1) Tensor or None when inactive
    posterior: LevelPosterior      # detached values


@dataclass
class ForwardResult:
    recon: Tensor                   # frame MSE + weighted log-duration MSE
    kl_sums: dict                   # level -> scalar Tensor (sum over units and dims)
    kl_values: dict                 # level -> (units, d) array
    hierarchy: LatentHierarchy
    frames: np.ndarray              # teacher-forced reconstruction (T, F)
    durations: np.ndarray           # (N,) duration predictor output
    recon_frames: float
    recon_duration: float


@dataclass
class GeneratedUtterance:
    phone_ids: np.ndarray
    word_map: np.ndarray
    durations: np.ndarray           # (N,) raw predictor output
    frame_offsets: np.ndarray       # (N+1,) from rounded durations
    frames: np.ndarray              # (T', F)


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def mat(name, rows, cols):
        params[name] = dc.tensor(rng.normal(0.0, 1.0 / np.sqrt(rows), (rows, cols)),
                                 requires_grad=True)

    def vec(name, n, value=0.0):
        params[name] = dc.tensor(np.full(n, value), requires_grad=True)

    params["embed"] = dc.tensor(rng.normal(0.0, 0.5, (config.vocab_size, config.phone_embed_dim)),
                                requires_grad=True)
    for level in LEVELS:
        d = config.latent_dims(level)
        if d == 0:
            continue
        h = config.hidden_dim
        in_dim = config.encoder_input_dim(level)
        for gate in ("r", "z", "c"):
            mat(f"enc_{level}.W{gate}", in_dim, h)
            mat(f"enc_{level}.U{gate}", h, h)
            vec(f"enc_{level}.b{gate}", h)
        mat(f"enc_{level}.Wmu", h, 1)
        vec(f"enc_{level}.bmu", 1)
        mat(f"enc_{level}.Wls", h, 1)
        vec(f"enc_{level}.bls", 1)
        mat(f"proj_{level}", d, config.proj_dim)
    D = config.decoder_cond_dim
    mat("dur.W1", D, config.hidden_dim)
    vec("dur.b1", config.hidden_dim)
    mat("dur.W2", config.hidden_dim, 1)
    vec("dur.b2", 1, value=config.duration_bias)
    mat("dec.W1", D + 1, config.hidden_dim)
    vec("dec.b1", config.hidden_dim)
    mat("dec.W2", config.hidden_dim, config.hidden_dim)
    vec("dec.b2", config.hidden_dim)
    mat("dec.W3", config.hidden_dim, config.num_freq)
    vec("dec.b3", config.num_freq)
    return params


def _gru_step(params: dict, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    r = dc.sigmoid(x @ params[f"{prefix}.Wr"] + h @ params[f"{prefix}.Ur"] + params[f"{prefix}.br"])
    z = dc.sigmoid(x @ params[f"{prefix}.Wz"] + h @ params[f"{prefix}.Uz"] + params[f"{prefix}.bz"])
    c = dc.tanh(x @ params[f"{prefix}.Wc"] + (r * h) @ params[f"{prefix}.Uc"] + params[f"{prefix}.bc"])
    return (1.0 - z) * h + z * c


def _kl_column(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Per-unit KL(N(mu, sigma) || N(0, 1)) = 0.5*(mu^2 + sigma^2 - 1 - 2*log_sigma)."""
    return 0.5 * (mu * mu + dc.expm1(2.0 * log_sigma) - 2.0 * log_sigma)


# ---------------------------------------------------------------------------
# the model


class HierarchicalVAE:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "HierarchicalVAE":
        return cls(config, init_params(config, seed))

    @classmethod
    def from_checkpoint(cls, path) -> "HierarchicalVAE":
        params, config = load_checkpoint(path)
        return cls(config, params)

    # -- encoder --------------------------------------------------------

    def conditional_encode(self, level: str, features: np.ndarray, conditioning: Tensor | None,
                           active: np.ndarray, noise: np.ndarray) -> EncodeResult:
        """Extract this level's latent dimensions one at a time.

        ``features`` is (units, F) and constant w.r.t. the graph;
        ``conditioning`` is an optional (units, C) tensor of coarser-level
        samples; ``noise`` is (units, d).  Inactive dimensions sample 0,
        record mu = log_sigma = 0, and contribute zero projections and KL.
        """
        cfg = self.config
        d = cfg.latent_dims(level)
        units = features.shape[0]
        if noise.shape != (units, d):
            raise ModelError(f"noise shape {noise.shape} != {(units, d)}")
        prefix = f"enc_{level}"
        proj = self.params[f"proj_{level}"]

        feats = dc.tensor(features)
        zero_ar = dc.tensor(np.zeros((units, cfg.proj_dim)))
        zero_col = dc.tensor(np.zeros((units, 1)))
        h = dc.tensor(np.zeros((units, cfg.hidden_dim)))
        ar_sum = zero_ar
        total_proj = zero_ar
        sample_cols, kl_cols = [], []
        mu_vals = np.zeros((units, d))
        ls_vals = np.zeros((units, d))
        sample_vals = np.zeros((units, d))

        for k in range(d):
            parts = [feats]
            if conditioning is not None:
                parts.append(conditioning)
            parts.append(ar_sum if cfg.autoregressive else zero_ar)
            x = dc.concat(parts, axis=1)
            h = _gru_step(self.params, prefix, x, h)
            if active[k]:
                mu = h @ self.params[f"{prefix}.Wmu"] + self.params[f"{prefix}.bmu"]
                ls = h @ self.params[f"{prefix}.Wls"] + self.params[f"{prefix}.bls"]
                if not np.all(np.isfinite(mu.data)) or not np.all(np.isfinite(ls.data)):
                    raise ModelError(f"non-finite posterior parameters at {level} dim {k}")
                sample = reparameterize(mu, ls, noise[:, k:k + 1])
                contrib = sample @ proj[k:k + 1, :]
                ar_sum = ar_sum + contrib
                total_proj = total_proj + contrib
                kl_cols.append(_kl_column(mu, ls))
                mu_vals[:, k] = mu.data[:, 0]
                ls_vals[:, k] = ls.data[:, 0]
                sample_vals[:, k] = sample.data[:, 0]
                sample_cols.append(sample)
            else:
                kl_cols.append(None)
                sample_cols.append(zero_col)

        sample_matrix = dc.concat(sample_cols, axis=1) if d > 1 else sample_cols[0]
        posterior = LevelPosterior(sample_vals, mu_vals, ls_vals)
        return EncodeResult(sample_matrix, total_proj, kl_cols, posterior)

    # -- decoder --------------------------------------------------------

    def decode(self, phone_ids: np.ndarray, word_map: np.ndarray, proj_phone: Tensor,
               proj_word: Tensor, proj_utt: Tensor | None,
               frame_durations: np.ndarray) -> tuple[Tensor, Tensor]:
        """(predicted durations (N,1), frames (T,F)) for a given frame layout.

        ``frame_durations`` fixes how many frames each phone renders: the
        ground truth during training (teacher forcing), the rounded predictor
        output during generation.
        """
        cfg = self.config
        n = len(phone_ids)
        embed_rows = self.params["embed"][np.asarray(phone_ids)]
        gmat = gather_matrix(word_map, int(word_map.max()) + 1)
        parts = [embed_rows, proj_phone, dc.tensor(gmat) @ proj_word]
        if cfg.d_u:
            parts.append(dc.tensor(np.ones((n, 1))) @ proj_utt)
        cond = dc.concat(parts, axis=1)

        dh = dc.tanh(cond @ self.params["dur.W1"] + self.params["dur.b1"])
        durations = dc.softplus(dh @ self.params["dur.W2"] + self.params["dur.b2"])

        frame_durations = np.asarray(frame_durations, dtype=np.int64)
        expand = np.repeat(np.eye(n), frame_durations, axis=0)
        pos = np.concatenate([(np.arange(dur) + 0.5) / dur for dur in frame_durations])
        x = dc.concat([dc.tensor(expand) @ cond, dc.tensor(pos[:, None])], axis=1)
        h1 = dc.tanh(x @ self.params["dec.W1"] + self.params["dec.b1"])
        h2 = dc.tanh(h1 @ self.params["dec.W2"] + self.params["dec.b2"])
        frames = h2 @ self.params["dec.W3"] + self.params["dec.b3"]
        return durations, frames

    # -- full pass ------------------------------------------------------

    def forward(self, utt: Utterance, noise: dict | None = None,
                masks: dict | None = None) -> ForwardResult:
        """Pool, encode coarse-to-fine, decode with teacher forcing."""
        cfg = self.config
        n, m = utt.num_phones, utt.num_words
        noise = noise or {}
        masks = masks or {}

        def level_noise(level, units):
            d = cfg.latent_dims(level)
            arr = noise.get(level)
            return np.zeros((units, d)) if arr is None else np.asarray(arr, dtype=np.float64)

        def level_mask(level):
            d = cfg.latent_dims(level)
            arr = masks.get(level)
            return np.ones(d, dtype=bool) if arr is None else np.asarray(arr, dtype=bool)

        phone_feats = pool_frames_to_phones(utt.spectrogram, utt.alignment)
        word_feats = pool_phones_to_words(phone_feats, utt.word_map)

        proj_utt = None
        utt_cond_w = None
        if cfg.d_u:
            utt_feats = utt.spectrogram.mean(axis=0, keepdims=True)
            enc_u = self.conditional_encode("utt", utt_feats, None,
                                            level_mask("utt"), level_noise("utt", 1))
            proj_utt = enc_u.projection
            utt_cond_w = dc.tensor(np.ones((m, 1))) @ enc_u.sample_matrix
        else:
            enc_u = EncodeResult(dc.tensor(np.zeros((1, 0))), dc.tensor(np.zeros((1, 0))),
                                 [], LevelPosterior(*(np.zeros((1, 0)),) * 3))

        enc_w = self.conditional_encode("word", word_feats, utt_cond_w,
                                        level_mask("word"), level_noise("word", m))

        gmat = dc.tensor(gather_matrix(utt.word_map, m))
        phone_cond = gmat @ enc_w.sample_matrix
        if cfg.d_u:
            phone_cond = dc.concat([phone_cond, dc.tensor(np.ones((n, 1))) @ enc_u.sample_matrix],
                                   axis=1)
        enc_p = self.conditional_encode("phone", phone_feats, phone_cond,
                                        level_mask("phone"), level_noise("phone", n))

        durations, frames = self.decode(utt.phone_ids, utt.word_map, enc_p.projection,
                                        enc_w.projection, proj_utt, utt.durations)

        target = dc.tensor(utt.spectrogram)
        diff = frames - target
        recon_frames = dc.tmean(diff * diff)
        log_true = np.log(utt.durations.astype(np.float64))[:, None]
        ddiff = dc.log(durations) - dc.tensor(log_true)
        recon_duration = dc.tmean(ddiff * ddiff)
        recon = recon_frames + cfg.duration_loss_weight * recon_duration

        kl_sums, kl_values = {}, {}
        for level, enc, units in (("utt", enc_u, 1), ("word", enc_w, m), ("phone", enc_p, n)):
            d = cfg.latent_dims(level)
            vals = np.zeros((units, d))
            total = dc.tensor(0.0)
            for k, col in enumerate(enc.kl_columns):
                if col is not None:
                    total = total + dc.tsum(col)
                    vals[:, k] = col.data[:, 0]
            kl_sums[level] = total
            kl_values[level] = vals

        hierarchy = LatentHierarchy(enc_u.posterior, enc_w.posterior, enc_p.posterior)
        return ForwardResult(recon, kl_sums, kl_values, hierarchy, frames.data.copy(),
                             durations.data[:, 0].copy(), float(recon_frames.data),
                             float(recon_duration.data))

    # -- generation -----------------------------------------------------

    def generate(self, phone_ids: np.ndarray, word_map: np.ndarray,
                 z_phone: np.ndarray | None = None, z_word: np.ndarray | None = None,
                 z_utt: np.ndarray | None = None) -> GeneratedUtterance:
        """Decode from explicit latent values (zeros give neutral prosody)."""
        cfg = self.config
        phone_ids = np.asarray(phone_ids, dtype=np.int64)
        word_map = np.asarray(word_map, dtype=np.int64)
        n = len(phone_ids)
        m = int(word_map.max()) + 1
        z_p = np.zeros((n, cfg.d_p)) if z_phone is None else np.asarray(z_phone, dtype=np.float64)
        z_w = np.zeros((m, cfg.d_w)) if z_word is None else np.asarray(z_word, dtype=np.float64)
        proj_phone = dc.tensor(z_p) @ self.params["proj_phone"]
        proj_word = dc.tensor(z_w) @ self.params["proj_word"]
        proj_utt = None
        if cfg.d_u:
            z_u = np.zeros((1, cfg.d_u)) if z_utt is None else np.asarray(z_utt).reshape(1, cfg.d_u)
            proj_utt = dc.tensor(z_u) @ self.params["proj_utt"]

        # first pass predicts durations from a single-frame layout
        dur_t, _ = self.decode(phone_ids, word_map, proj_phone, proj_word, proj_utt,
                               np.ones(n, dtype=np.int64))
        durations = dur_t.data[:, 0].copy()
        rounded = np.clip(np.rint(durations), 1, MAX_GENERATED_FRAMES_PER_PHONE).astype(np.int64)
        _, frames = self.decode(phone_ids, word_map, proj_phone, proj_word, proj_utt, rounded)
        offsets = np.concatenate([[0], np.cumsum(rounded)])
        return GeneratedUtterance(phone_ids, word_map, durations, offsets, frames.data.copy())

    def reconstruct(self, utt: Utterance) -> ForwardResult:
        """Deterministic reconstruction: posterior means, teacher-forced durations."""
        return self.forward(utt)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 config length + JSON, u32 tensor
# count, then per tensor: u32 name length + UTF-8 name, u32 rank, u32
# extents, f64 data.  Little-endian; round-trips are bit-exact.


def save_checkpoint(path, params: dict, config: ModelConfig) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        blob = name.encode("utf-8")
        data = params[name].data
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, ModelConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    magic = bytes(read("<4s")[0])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    version, cfg_len = read("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = config_from_dict(json.loads(blob[pos:pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    (count,) = read("<I")
    params = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        n_items = int(np.prod(shape)) if rank else 1
        size = 8 * n_items
        if pos + size > len(blob):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        data = np.frombuffer(blob, dtype="<f8", count=n_items, offset=pos).reshape(shape).copy()
        pos += size
        params[name] = dc.tensor(data, requires_grad=True)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes at offset {pos}")
    return params, config
