"""Targeted CTC attack with an optional acoustic-representation alignment term.

The objective is ``L_adv + beta * L_AR`` where ``L_adv`` is CTC loss on the
surrogate plus an L2 penalty on the perturbation, and ``L_AR`` is one minus
the cosine similarity between time-pooled encoder activations of the
adversarial clip and of the target audio. Any base objective with the
signature of :func:`loss_adv` can be swapped in (see :func:`eot_noise_objective`).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import diffgraph as dg
from .audio import PCM16_SCALE, AudioClip, Perturbation, distortion_db, peak_db, snr_db
from .ctc import ctc_loss, greedy_decode, min_frames
from .exceptions import (
    DegenerateRepresentationError,
    DegenerateSilenceError,
    InfeasibleTargetError,
    InfiniteSNRError,
    NonFiniteLossError,
)
from .optim import AdamState, adam_step, ifgsm_step
from .validation import decode_tokens, encode_text, normalize_text

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sign_descent")
TRACE_FIELDS = ("iter", "L_adv", "L_AR", "L_tot", "Q_dB")

__all__ = [
    "AttackConfig", "AttackResult", "AROAttack", "apply_node", "loss_adv", "loss_ar",
    "loss_total", "cosine_similarity", "ifgsm_step", "adam_step", "project_constraint",
    "run_attack", "eot_noise_objective", "write_trace_csv",
]


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.003
    beta: float = 10.0
    tau: float = -10.0
    max_iters: int = 500
    lambda_reg: float = 0.01
    init_scale: float = 0.001
    optimizer: str = "adam"
    layer: int = 1
    eot_samples: int = 0
    eot_noise_db: float = -30.0
    early_stop: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.init_scale >= 0:
            raise ValueError("init_scale must be non-negative")
        if self.eot_samples < 0:
            raise ValueError("eot_samples must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **changes})


@dataclass
class AttackResult:
    """``loss_trace`` rows are (L_adv, L_AR, L_tot); L_AR is None when the term is absent."""

    adversarial: AudioClip
    delta: Perturbation
    loss_trace: list[tuple[float, float | None, float]] = field(repr=False)
    distortion_trace: list[float] = field(repr=False)
    iterations_run: int
    target_text: str
    surrogate_decode: str
    distortion: float
    snr: float

    @property
    def success(self) -> bool:
        return normalize_text(self.surrogate_decode) == self.target_text


# --- loss terms ---------------------------------------------------------------


def _delta_node(delta) -> dg.Node:
    if isinstance(delta, dg.Node):
        return delta
    return dg.constant(getattr(delta, "delta", delta))


def apply_node(x: AudioClip, delta) -> dg.Node:
    """Differentiable x + delta clamped to [-1, 1]."""
    d = _delta_node(delta)
    return dg.clip(dg.add(dg.constant(x.samples), d), -1.0, 1.0)


def _target_tokens(t) -> np.ndarray:
    return encode_text(t) if isinstance(t, str) else np.asarray(t, dtype=np.int64)


def _regularized_ctc(f, x_adv: dg.Node, d: dg.Node, tokens, lambda_reg: float) -> dg.Node:
    lattice = f.forward(x_adv)
    ctc = ctc_loss(lattice, tokens)
    if lambda_reg == 0:
        return ctc
    return dg.add(ctc, dg.scalar_mul(dg.sum(dg.square(d)), lambda_reg))


def loss_adv(f, x: AudioClip, delta, t, lambda_reg: float = 0.01) -> dg.Node:
    """CTC loss of the surrogate on clip(x + delta) towards ``t`` plus lambda * ||delta||^2."""
    d = _delta_node(delta)
    return _regularized_ctc(f, apply_node(x, d), d, _target_tokens(t), lambda_reg)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateRepresentationError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _cosine_node(u: dg.Node, v: dg.Node) -> dg.Node:
    uu = dg.sum(dg.square(u))
    vv = dg.sum(dg.square(v))
    if uu.item() == 0 or vv.item() == 0:
        raise DegenerateRepresentationError("pooled representation has zero norm")
    return dg.div(dg.sum(dg.mul(u, v)), dg.mul(dg.sqrt(uu), dg.sqrt(vv)))


def _ar_from_pooled(pooled_adv: dg.Node, pooled_target: dg.Node) -> dg.Node:
    return dg.add_scalar(dg.scalar_mul(_cosine_node(pooled_adv, pooled_target), -1.0), 1.0)


def loss_ar(E, x: AudioClip, delta, x_t) -> dg.Node:
    """1 - cosine(mean_time E(clip(x + delta)), mean_time E(x_t)); lies in [0, 2]."""
    target = x_t if isinstance(x_t, dg.Node) else E.pooled(x_t)
    return _ar_from_pooled(E.pooled(apply_node(x, delta)), dg.constant(target.value))


def loss_total(f, E, x: AudioClip, delta, t, x_t, cfg: AttackConfig) -> dg.Node:
    """L_adv + beta * L_AR over one shared clip(x + delta) node."""
    d = _delta_node(delta)
    x_adv = apply_node(x, d)
    adv = _regularized_ctc(f, x_adv, d, _target_tokens(t), cfg.lambda_reg)
    s_t = dg.constant(E.pooled(x_t).value)
    ar = _ar_from_pooled(E.pooled(x_adv), s_t)
    return dg.add(adv, dg.scalar_mul(ar, cfg.beta))


def eot_noise_objective(f, x: AudioClip, delta, t, K: int, noise_db: float, seed,
                        lambda_reg: float = 0.01) -> dg.Node:
    """Mean of :func:`loss_adv` over ``K`` seeded uniform-noise draws.

    Noise amplitude is ``noise_db`` relative to the clip peak; ``-inf`` disables it.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    d = _delta_node(delta)
    tokens = _target_tokens(t)
    rng = np.random.default_rng(seed)
    amp = 0.0 if noise_db == -math.inf else 10.0 ** ((peak_db(x.samples) + noise_db) / 20.0)
    terms = []
    for _ in range(K):
        noise = rng.uniform(-amp, amp, size=len(x)) if amp > 0 else np.zeros(len(x))
        x_adv = dg.clip(dg.add(dg.constant(x.samples + noise), d), -1.0, 1.0)
        terms.append(_regularized_ctc(f, x_adv, d, tokens, lambda_reg))
    total = terms[0]
    for term in terms[1:]:
        total = dg.add(total, term)
    return dg.scalar_mul(total, 1.0 / K)


# --- constraint ---------------------------------------------------------------


def project_constraint(delta, x: AudioClip, tau: float) -> np.ndarray:
    """Scale ``delta`` down so its peak is at most ``tau`` dB relative to the clip peak."""
    delta = np.array(getattr(delta, "delta", delta), dtype=np.float64)
    if not np.any(delta):
        return delta
    q = peak_db(delta) - peak_db(x.samples)
    if q <= tau:
        return delta
    scaled = delta * 10.0 ** ((tau - q) / 20.0)
    # Guard against the last-ulp overshoot of the log/exp round trip.
    while peak_db(scaled) - peak_db(x.samples) > tau:
        scaled = np.nextafter(scaled, 0.0)
    return scaled


def _to_pcm_grid(delta: np.ndarray) -> np.ndarray:
    """Truncate toward zero onto the 16-bit step grid; never increases |delta|."""
    return np.trunc(delta * PCM16_SCALE) / PCM16_SCALE


# --- driver ------------------------------------------------------------------------


def _objective(f, E, x, d, tokens, s_t, cfg, seed, step):
    """Returns (L_tot node, L_adv value, L_AR value or None, noise-free lattice or None)."""
    x_adv = apply_node(x, d)
    lattice = None
    if cfg.eot_samples > 0:
        adv = eot_noise_objective(f, x, d, tokens, cfg.eot_samples, cfg.eot_noise_db,
                                  [seed, 2, step], cfg.lambda_reg)
    else:
        lattice = f.forward(x_adv)
        adv = ctc_loss(lattice, tokens)
        if cfg.lambda_reg != 0:
            adv = dg.add(adv, dg.scalar_mul(dg.sum(dg.square(d)), cfg.lambda_reg))
    if E is None:
        return adv, adv.item(), None, lattice
    ar = _ar_from_pooled(E.pooled(x_adv), s_t)
    return dg.add(adv, dg.scalar_mul(ar, cfg.beta)), adv.item(), ar.item(), lattice


def run_attack(x: AudioClip, t, x_t: AudioClip | None, f, E, cfg: AttackConfig,
               seed=0) -> AttackResult:
    """Optimize a perturbation of ``x`` so the surrogate ``f`` transcribes ``t``.

    ``E=None`` removes the representation term entirely. The returned
    perturbation is snapped toward zero onto the 16-bit grid and satisfies the
    distortion bound ``cfg.tau``.
    """
    tokens = _target_tokens(t)
    target_text = decode_tokens(tokens)
    n_frames = f.front_end.num_frames(len(x))
    if n_frames < min_frames(tokens):
        raise InfeasibleTargetError(
            f"target {target_text!r} needs {min_frames(tokens)} frames, clip {x.id!r} has {n_frames}"
        )
    s_t = None
    if E is not None:
        s_t = dg.constant(E.pooled(x_t).value)
        if not np.any(s_t.value):
            raise DegenerateRepresentationError("target audio has a zero representation")

    rng = np.random.default_rng(seed)
    delta = rng.uniform(-cfg.init_scale, cfg.init_scale, size=len(x))
    delta = _to_pcm_grid(project_constraint(delta, x, cfg.tau))
    adam = AdamState.zeros_like(delta)
    trace: list[tuple[float, float | None, float]] = []
    q_trace: list[float] = []

    for step in range(cfg.max_iters):
        d = dg.leaf(delta)
        total, adv_val, ar_val, lattice = _objective(f, E, x, d, tokens, s_t, cfg, seed, step)
        q_trace.append(_distortion_or_floor(delta, x))
        trace.append((adv_val, ar_val, total.item()))
        if not np.isfinite(total.item()):
            raise NonFiniteLossError(f"objective became {total.item()} at iteration {step}", trace)
        if cfg.early_stop:
            if lattice is None:
                lattice = f.forward(apply_node(x, delta))
            if normalize_text(decode_tokens(greedy_decode(lattice))) == target_text:
                break
        g = dg.backward(total)[d]
        if cfg.optimizer == "adam":
            adam, delta = adam_step(adam, delta, g, cfg.alpha)
        else:
            delta = ifgsm_step(delta, g, cfg.alpha)
        # Iterates stay on the 16-bit grid so the early-stop decode sees exactly
        # what the emitted WAV will contain.
        delta = _to_pcm_grid(project_constraint(delta, x, cfg.tau))

    adv_samples = np.clip(x.samples + delta, -1.0, 1.0)
    effective = Perturbation(adv_samples - x.samples)
    adversarial = x.with_samples(adv_samples)
    decode = decode_tokens(greedy_decode(f.forward(adversarial)))
    return AttackResult(
        adversarial=adversarial,
        delta=effective,
        loss_trace=trace,
        distortion_trace=q_trace,
        iterations_run=len(trace),
        target_text=target_text,
        surrogate_decode=decode,
        distortion=_distortion_or_floor(effective.delta, x),
        snr=_snr_or_inf(x, effective),
    )


def _distortion_or_floor(delta, x) -> float:
    try:
        return distortion_db(Perturbation(delta), x)
    except DegenerateSilenceError:
        return -math.inf


def _snr_or_inf(x, delta) -> float:
    try:
        return snr_db(x, delta)
    except InfiniteSNRError:
        return math.inf


def write_trace_csv(result: AttackResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for i, ((adv, ar, tot), q) in enumerate(zip(result.loss_trace, result.distortion_trace)):
            w.writerow([i, repr(adv), "" if ar is None else repr(ar), repr(tot), repr(q)])


class AROAttack(BaseEstimator):
    """Estimator-style front door to :func:`run_attack`.

    ``surrogate`` is a fitted :class:`~aro_lab.models.AsrModel`; ``srm`` a
    fitted :class:`~aro_lab.models.SrmModel` or ``None`` to drop the
    representation term. ``transform`` maps attack triples to adversarial clips.
    """

    def __init__(self, surrogate=None, srm=None, alpha=0.003, beta=10.0, tau=-10.0,
                 max_iters=500, lambda_reg=0.01, init_scale=0.001, optimizer="adam", layer=1,
                 eot_samples=0, eot_noise_db=-30.0, early_stop=True, seed=0):
        self.surrogate = surrogate
        self.srm = srm
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.max_iters = max_iters
        self.lambda_reg = lambda_reg
        self.init_scale = init_scale
        self.optimizer = optimizer
        self.layer = layer
        self.eot_samples = eot_samples
        self.eot_noise_db = eot_noise_db
        self.early_stop = early_stop
        self.seed = seed

    @property
    def config(self) -> AttackConfig:
        return AttackConfig(self.alpha, self.beta, self.tau, self.max_iters, self.lambda_reg,
                            self.init_scale, self.optimizer, self.layer, self.eot_samples,
                            self.eot_noise_db, self.early_stop)

    def fit(self, X=None, y=None):
        from .models import RepresentationExtractor

        if self.surrogate is None:
            raise ValueError("AROAttack needs a fitted surrogate model")
        self.config  # validates hyperparameters
        self.extractor_ = None if self.srm is None else RepresentationExtractor(self.srm, self.layer).fit()
        return self

    def attack(self, triple, seed=None) -> AttackResult:
        if not hasattr(self, "extractor_"):
            self.fit()
        return run_attack(triple.source.clip, triple.target_text, triple.target_audio,
                          self.surrogate, self.extractor_, self.config,
                          self.seed if seed is None else seed)

    def transform(self, X) -> list[AudioClip]:
        self.results_ = [self.attack(tr) for tr in X]
        return [r.adversarial for r in self.results_]

