"""Multilevel ELBO loss, latent-dimension scheduling, Adam, and the training
loop with CSV loss traces and checkpointing.

The loss for one utterance is

    total = recon + beta1 * sum(kl_phone) + beta2 * sum(kl_word)
                  + beta3 * sum(kl_utt)

where recon is the teacher-forced frame MSE plus the weighted log-duration
MSE, and each KL entry is the per-(unit, dimension) divergence from the
standard normal prior, computed from a single posterior sample of the
coarser levels.  Dimensions that the schedule has not yet activated sample
zero and contribute exactly zero KL.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .corpus import Utterance
from .model import HierarchicalVAE, ModelConfig, ForwardResult, save_checkpoint


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, step: int, total: float):
        super().__init__(f"training diverged at step {step}: total={total}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule_interval: int = 2000
    seed: int = 0
    checkpoint_every: int = 0    # 0: only the final checkpoint

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.schedule_interval) < 1:
            raise TrainingError("steps, batch_size and schedule_interval must be >= 1")
        if self.learning_rate <= 0:
            raise TrainingError("learning rate must be positive")


def config_from_dict(d: dict) -> TrainConfig:
    allowed = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise TrainingError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**d)


@dataclass
class ElboReport:
    recon: float
    kl_phone: np.ndarray   # (N, d_p)
    kl_word: np.ndarray    # (M, d_w)
    kl_utt: np.ndarray     # (1, d_u)
    total: float = field(init=False)
    betas: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        b1, b2, b3 = self.betas
        self.total = (self.recon + b1 * float(self.kl_phone.sum())
                      + b2 * float(self.kl_word.sum()) + b3 * float(self.kl_utt.sum()))


def kl_standard_normal(mu: float, log_sigma: float) -> float:
    """KL(N(mu, sigma^2) || N(0, 1)); numerically nonnegative."""
    return 0.5 * (mu * mu + np.expm1(2.0 * log_sigma) - 2.0 * log_sigma)


def elbo_multilevel(out: ForwardResult, beta1: float, beta2: float,
                    beta3: float) -> tuple[dc.Tensor, ElboReport]:
    """(scalar loss tensor, per-term report) for one utterance forward pass."""
    for level, vals in out.kl_values.items():
        if not np.all(np.isfinite(vals)):
            raise TrainingError(f"NaN in {level}-level KL")
    if not np.isfinite(float(out.recon.data)):
        raise TrainingError("NaN in reconstruction term")
    loss = (out.recon + beta1 * out.kl_sums["phone"] + beta2 * out.kl_sums["word"]
            + beta3 * out.kl_sums["utt"])
    report = ElboReport(float(out.recon.data), out.kl_values["phone"],
                        out.kl_values["word"], out.kl_values["utt"],
                        betas=(beta1, beta2, beta3))
    return loss, report


def schedule_mask(step: int, d: int, interval: int) -> np.ndarray:
    """Dimension k (1-based) is active iff step >= (k-1) * interval."""
    if interval < 1:
        raise TrainingError("schedule interval must be >= 1")
    return step >= interval * np.arange(d)


def level_masks(step: int, config: ModelConfig, interval: int) -> dict:
    masks = {}
    for level, flag in (("phone", config.schedule_phone), ("word", config.schedule_word),
                        ("utt", config.schedule_utt)):
        d = config.latent_dims(level)
        masks[level] = schedule_mask(step, d, interval) if flag else np.ones(d, dtype=bool)
    return masks


# ---------------------------------------------------------------------------
# Adam


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        """One update with bias correction; raises on non-finite gradients."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, tensor in self.params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            tensor.data = tensor.data - scale * self.m[name] / (np.sqrt(self.v[name]) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TraceRow:
    step: int
    recon: float
    kl_phone_total: float
    kl_word_total: float
    kl_utt_total: float
    total: float
    active_dims: int


def _draw_noise(rng: np.random.Generator, utt: Utterance, config: ModelConfig) -> dict:
    return {"utt": rng.standard_normal((1, config.d_u)),
            "word": rng.standard_normal((utt.num_words, config.d_w)),
            "phone": rng.standard_normal((utt.num_phones, config.d_p))}


def train(corpus: list[Utterance], model_config: ModelConfig, train_config: TrainConfig,
          trace_path=None, checkpoint_path=None, step_callback=None) -> tuple[HierarchicalVAE, list[TraceRow]]:
    """Train a fresh model; fully deterministic given the configs.

    ``step_callback(step, reports, outputs)`` is invoked after each step with
    the per-utterance ElboReports and ForwardResults of the minibatch.
    """
    if not corpus:
        raise TrainingError("empty corpus")
    model = HierarchicalVAE.init(model_config, seed=train_config.seed)
    opt = Adam(model.params, train_config.learning_rate, train_config.adam_beta1,
               train_config.adam_beta2, train_config.adam_eps)
    rng = np.random.default_rng(train_config.seed)
    param_list = list(model.params.values())
    param_names = list(model.params.keys())
    trace: list[TraceRow] = []

    for step in range(train_config.steps):
        masks = level_masks(step, model_config, train_config.schedule_interval)
        idx = rng.integers(0, len(corpus), size=train_config.batch_size)
        losses, reports, outputs = [], [], []
        for i in idx:
            utt = corpus[int(i)]
            out = model.forward(utt, _draw_noise(rng, utt, model_config), masks)
            loss, report = elbo_multilevel(out, model_config.beta1, model_config.beta2,
                                           model_config.beta3)
            losses.append(loss)
            reports.append(report)
            outputs.append(out)
        batch_loss = losses[0]
        for extra in losses[1:]:
            batch_loss = batch_loss + extra
        batch_loss = batch_loss * (1.0 / len(losses))

        total = float(batch_loss.data)
        if not np.isfinite(total) or total > 1e6:
            raise TrainingDiverged(step, total)

        grads = dict(zip(param_names, dc.grad(batch_loss, param_list)))
        opt.step(grads)

        b = len(reports)
        trace.append(TraceRow(
            step,
            sum(r.recon for r in reports) / b,
            sum(float(r.kl_phone.sum()) for r in reports) / b,
            sum(float(r.kl_word.sum()) for r in reports) / b,
            sum(float(r.kl_utt.sum()) for r in reports) / b,
            sum(r.total for r in reports) / b,
            int(masks["phone"].sum()),
        ))
        if step_callback is not None:
            step_callback(step, reports, outputs)
        if (checkpoint_path is not None and train_config.checkpoint_every
                and (step + 1) % train_config.checkpoint_every == 0):
            save_checkpoint(checkpoint_path, model.params, model_config)

    if trace_path is not None:
        write_trace(trace_path, trace)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.params, model_config)
    return model, trace


def write_trace(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "recon", "kl_phone_total", "kl_word_total",
                         "kl_utt_total", "total", "active_dims"])
        for row in trace:
            writer.writerow([row.step, repr(row.recon), repr(row.kl_phone_total),
                             repr(row.kl_word_total), repr(row.kl_utt_total),
                             repr(row.total), row.active_dims])
