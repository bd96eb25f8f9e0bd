"""Transfer evaluation: batch attacks, per-model report cells and parameter sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .attack import AttackConfig, AttackResult, run_attack
from .audio import Perturbation, snr_db
from .exceptions import InfeasibleTargetError, InfiniteSNRError
from .metrics import cer, sroa, untargeted_success, wer
from .validation import check_clips

log = logging.getLogger(__name__)

REFERENCE_BETAS = (120.0, 150.0, 180.0, 220.0)
# Toy CTC losses are an order of magnitude smaller than on large ASR models,
# so the reference large-model grid is rescaled; 180 maps to 10.
BETA_SCALE = 1.0 / 18.0
DESK_BETAS = tuple(b * BETA_SCALE for b in REFERENCE_BETAS)

CELL_FIELDS = ("config", "model", "sroa", "cer", "wer", "snr", "count")


def clip_seed(seed: int, clip_id: str) -> list[int]:
    """Per-clip RNG seed; independent of worker assignment and triple order."""
    return [int(seed), zlib.crc32(clip_id.encode("utf-8"))]


# --- batch attacks -----------------------------------------------------------------


def _attack_one(args):
    triple, surrogate, extractor, cfg, seed = args
    try:
        return run_attack(triple.source.clip, triple.target_text, triple.target_audio,
                          surrogate, extractor, cfg, clip_seed(seed, triple.id))
    except InfeasibleTargetError as exc:
        log.warning("skipping %s: %s", triple.id, exc)
        return None


def run_attacks(triples, surrogate, extractor, cfg: AttackConfig, seed: int = 0,
                workers: int = 1) -> list[tuple[object, AttackResult]]:
    """Attack every triple; infeasible targets are logged and skipped.

    Returns ``(triple, result)`` pairs in input order.
    """
    jobs = [(tr, surrogate, extractor, cfg, seed) for tr in triples]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_attack_one, jobs, chunksize=4))
    else:
        results = [_attack_one(j) for j in jobs]
    return [(tr, r) for tr, r in zip(triples, results) if r is not None]


# --- report -----------------------------------------------------------------------


@dataclass(frozen=True)
class TransferCell:
    config: str
    model: str
    sroa: float
    cer: float
    wer: float
    snr: float
    count: int


@dataclass
class TransferReport:
    """Cells indexed by (attack configuration, model) plus surrogate targeted success."""

    cells: list[TransferCell] = field(default_factory=list)
    targeted: dict[str, float] = field(default_factory=dict)

    def cell(self, config: str, model: str) -> TransferCell:
        for c in self.cells:
            if c.config == config and c.model == model:
                return c
        raise KeyError((config, model))

    def transfer_sroa(self, config: str, models: Sequence[str]) -> float:
        """Unweighted mean SRoA over ``models``."""
        return float(np.mean([self.cell(config, m).sroa for m in models]))

    def extend(self, other: "TransferReport") -> "TransferReport":
        self.cells.extend(other.cells)
        self.targeted.update(other.targeted)
        return self

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CELL_FIELDS)
            for c in self.cells:
                w.writerow([c.config, c.model, _fmt(c.sroa), _fmt(c.cer), _fmt(c.wer),
                            _fmt(c.snr), c.count])

    def to_json(self, path) -> None:
        doc = {
            "cells": [{k: _json_num(v) for k, v in asdict(c).items()} for c in self.cells],
            "targeted_success": {k: _json_num(v) for k, v in sorted(self.targeted.items())},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(value) -> str:
    return repr(float(value)) if math.isfinite(value) else ""


def _json_num(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _mean_snr(clean_clips, attacked) -> float:
    if clean_clips is None:
        return math.nan
    vals = []
    for x, a in zip(clean_clips, attacked):
        try:
            vals.append(snr_db(x, Perturbation(a.samples - x.samples)))
        except InfiniteSNRError:
            pass
    return float(np.mean(vals)) if vals else math.nan


def transfer_matrix(attacked_clips, original_refs: Sequence[str], models: Mapping[str, object],
                    clean_clips=None, label: str = "attack") -> TransferReport:
    """Greedy-decode every clip on every model and score against the original transcripts.

    ``clean_clips`` (aligned with ``attacked_clips``) enables the SNR column;
    without it SNR is NaN.
    """
    attacked = list(attacked_clips)
    refs = list(original_refs)
    if len(attacked) != len(refs):
        raise ValueError(f"{len(attacked)} clips but {len(refs)} references")
    if not attacked:
        raise ValueError("no clips to evaluate")
    clean = None if clean_clips is None else list(clean_clips)
    snr = _mean_snr(clean, attacked)
    report = TransferReport()
    for name, model in models.items():
        check_clips(attacked, model.sample_rate)
        hyps = model.predict(attacked)
        report.cells.append(TransferCell(
            config=label,
            model=name,
            sroa=sroa([untargeted_success(r, h) for r, h in zip(refs, hyps)]),
            cer=float(np.mean([cer(r, h) for r, h in zip(refs, hyps)])),
            wer=float(np.mean([wer(r, h) for r, h in zip(refs, hyps)])),
            snr=snr,
            count=len(attacked),
        ))
    return report


def evaluate_attacks(pairs, models: Mapping[str, object], label: str) -> TransferReport:
    """Report for ``(triple, AttackResult)`` pairs, with surrogate targeted success."""
    if not pairs:
        raise ValueError("no attack results to evaluate")
    triples = [p[0] for p in pairs]
    results = [p[1] for p in pairs]
    report = transfer_matrix([r.adversarial for r in results],
                             [t.source.transcript for t in triples], models,
                             clean_clips=[t.source.clip for t in triples], label=label)
    report.targeted[label] = sroa([r.success for r in results])
    return report


# --- sweeps -----------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    sroa: float
    per_model: dict[str, float]
    targeted: float
    snr_mean: float
    snr_median: float
    count: int


def _triples_for(triples, seed):
    return list(triples(seed) if callable(triples) else triples)


def _sweep_point(axis, value, triples, cfg, surrogate, srm, heldout, seeds, workers):
    from .models import RepresentationExtractor

    per_model = {m: [] for m in heldout}
    targeted, snrs, count = [], [], 0
    extractor = None if cfg.beta == 0 else RepresentationExtractor(srm, cfg.layer).fit()
    for seed in seeds:
        pairs = run_attacks(_triples_for(triples, seed), surrogate, extractor, cfg, seed, workers)
        report = evaluate_attacks(pairs, heldout, label=f"{axis}={value}/seed={seed}")
        for m in heldout:
            per_model[m].append(report.cell(report.cells[0].config, m).sroa)
        targeted.append(sroa([r.success for _, r in pairs]))
        snrs.extend(r.snr for _, r in pairs)
        count += len(pairs)
    finite = [s for s in snrs if math.isfinite(s)]
    means = {m: float(np.mean(v)) for m, v in per_model.items()}
    return SweepRow(
        axis=axis,
        value=float(value),
        sroa=float(np.mean(list(means.values()))),
        per_model=means,
        targeted=float(np.mean(targeted)),
        snr_mean=float(np.mean(finite)) if finite else math.nan,
        snr_median=float(np.median(finite)) if finite else math.nan,
        count=count,
    )


def sweep_beta(triples, betas: Sequence[float], cfg: AttackConfig, surrogate, srm,
               heldout: Mapping[str, object], seeds: Sequence[int] = (0, 1, 2),
               workers: int = 1) -> list[SweepRow]:
    """One row per beta: transfer SRoA averaged over held-out models and seeds.

    ``triples`` is a list, or a callable mapping a seed to a list. A zero beta
    runs with the representation term removed.
    """
    if not betas:
        raise ValueError("betas must be non-empty")
    return [_sweep_point("beta", b, triples, cfg.replace(beta=float(b)), surrogate, srm,
                         heldout, seeds, workers) for b in betas]


def sweep_layer(triples, cfg: AttackConfig, surrogate, srm, heldout: Mapping[str, object],
                seeds: Sequence[int] = (0, 1, 2), layers: Sequence[int] | None = None,
                workers: int = 1) -> list[SweepRow]:
    """One row per encoder tap (default all layers), all at ``cfg.beta`` and identical seeds."""
    if srm.n_layers < 2:
        raise ValueError("a layer sweep needs an encoder with at least two layers")
    if cfg.beta <= 0:
        raise ValueError("a layer sweep needs beta > 0")
    layers = list(range(1, srm.n_layers + 1)) if layers is None else list(layers)
    return [_sweep_point("layer", ell, triples, cfg.replace(layer=int(ell)), surrogate, srm,
                         heldout, seeds, workers) for ell in layers]


def sweep_fields(rows: Sequence[SweepRow]) -> list[str]:
    models = list(rows[0].per_model) if rows else []
    axis = rows[0].axis if rows else "value"
    return [axis, "sroa", *(f"sroa_{m}" for m in models), "targeted", "snr_mean", "snr_median",
            "count"]


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(sweep_fields(rows))
        for r in rows:
            value = str(int(r.value)) if r.axis == "layer" else _fmt(r.value)
            w.writerow([value, _fmt(r.sroa), *(_fmt(v) for v in r.per_model.values()),
                        _fmt(r.targeted), _fmt(r.snr_mean), _fmt(r.snr_median), r.count])


def write_sweep_json(rows: Sequence[SweepRow], path) -> None:
    doc = [{k: (v if not isinstance(v, float) else _json_num(v)) for k, v in asdict(r).items()}
           for r in rows]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def seed_triples(make: Callable[[int], list], limit: int | None = None) -> Callable[[int], list]:
    """Wrap a ``seed -> triples`` factory, keeping the first ``limit`` triples."""
    def factory(seed):
        out = make(seed)
        return out if limit is None else out[:limit]

    return factory


__all__ = [
    "BETA_SCALE", "DESK_BETAS", "REFERENCE_BETAS", "SweepRow", "TransferCell", "TransferReport",
    "clip_seed", "evaluate_attacks", "run_attacks", "sweep_beta", "sweep_layer",
    "transfer_matrix", "write_sweep_csv", "write_sweep_json",
]
