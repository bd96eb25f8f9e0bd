"""Command-line driver: ``aro-lab <subcommand> [--config run.ini] ...``.

Every subcommand reads an INI file (sections ``corpus``, ``models``, ``attack``,
``eval``, ``output``), applies command-line overrides, echoes the effective
config next to its results and is reproducible from (config, seed).
Set ``ARO_LAB_OUTPUT`` to redirect the output directory.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .attack import AttackConfig, write_trace_csv
from .audio import write_wav
from .corpus import load_manifest, make_triples, synth_corpus, write_corpus
from .exceptions import AroLabError, CheckpointError, ConfigError, ManifestError
from .harness import (
    DESK_BETAS,
    run_attacks,
    sweep_beta,
    sweep_layer,
    transfer_matrix,
    write_sweep_csv,
    write_sweep_json,
)
from .models import AsrModel, SrmModel, load_checkpoint, save_checkpoint, train_asr, train_srm

log = logging.getLogger("aro_lab")

OUTPUT_ENV = "ARO_LAB_OUTPUT"
MODEL_ARCH = {"asr-a": "A", "asr-b": "B", "asr-c": "C", "srm": "SRM"}

_ATTACK_TYPES = {f.name: f.type for f in fields(AttackConfig)}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in _str_list(text)]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _opt_path(text: str) -> str:
    return text.strip()


_CASTS = {"float": float, "int": int, "str": str, "bool": _bool}

# section -> key -> (parser, default as text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "corpus": {
        "seed": (int, "0"),
        "word_count": (int, "20"),
        "utterance_count": (int, "250"),
        "target_pool_size": (int, "50"),
        "manifest": (_opt_path, ""),
    },
    "models": {
        "seed": (int, "0"),
        "epochs": (int, "30"),
        "batch_size": (int, "8"),
        "learning_rate": (float, "0.001"),
        "cer_gate": (float, "15.0"),
        "surrogate": (str, "asr-a"),
        "srm": (str, "srm"),
    },
    "attack": {
        **{f.name: (_CASTS[f.type], str(f.default)) for f in fields(AttackConfig)},
        "seed": (int, "0"),
        "limit": (int, "0"),
        "workers": (int, "1"),
    },
    "eval": {
        "models": (_str_list, "asr-a,asr-b,asr-c"),
        "heldout": (_str_list, "asr-b,asr-c"),
        "seeds": (_int_list, "0,1,2"),
    },
    "output": {"dir": (_opt_path, "runs")},
}


# --- config -----------------------------------------------------------------------


class RunConfig:
    """Validated, typed view of the INI document plus the raw text for echoing."""

    def __init__(self, parser: configparser.ConfigParser):
        self.raw = parser
        self.values: dict[str, dict[str, object]] = {}
        for section, keys in SCHEMA.items():
            self.values[section] = {}
            for key, (cast, _) in keys.items():
                text = parser.get(section, key)
                try:
                    self.values[section][key] = cast(text)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None
        try:
            self.attack_config()
        except ValueError as exc:
            raise ConfigError(f"[attack] {exc}") from None
        manifest = self.values["corpus"]["manifest"]
        if manifest and not Path(manifest).is_file():
            raise ConfigError(f"[corpus] manifest {manifest!r} does not exist")
        for key in ("models", "heldout"):
            for name in self.values["eval"][key]:
                if name not in MODEL_ARCH or name == "srm":
                    raise ConfigError(f"[eval] {key}: unknown ASR model {name!r}")

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})
        if path is not None:
            user = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
            user.optionxform = str
            try:
                with open(path, encoding="utf-8") as fh:
                    user.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from None
            for section in user.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, value in user.items(section):
                    if key not in SCHEMA[section]:
                        raise ConfigError(f"unknown config key {key!r} in [{section}]")
                    parser.set(section, key, value)
        for (section, key), value in (overrides or {}).items():
            parser.set(section, key, str(value))
        env = os.environ.get(OUTPUT_ENV)
        if env:
            parser.set("output", "dir", env)
        return cls(parser)

    def __getitem__(self, section):
        return self.values[section]

    @property
    def output(self) -> Path:
        return Path(self["output"]["dir"])

    def attack_config(self) -> AttackConfig:
        a = self.values["attack"]
        return AttackConfig(**{k: a[k] for k in _ATTACK_TYPES})

    def echo(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "config.ini", "w", encoding="utf-8", newline="\n") as fh:
            self.raw.write(fh)


# --- helpers --------------------------------------------------------------------------


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_finite(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finite(doc):
    if isinstance(doc, float):
        return doc if math.isfinite(doc) else None
    if isinstance(doc, dict):
        return {k: _finite(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_finite(v) for v in doc]
    return doc


def _corpus_manifest(cfg: RunConfig) -> Path:
    manifest = cfg["corpus"]["manifest"]
    return Path(manifest) if manifest else cfg.output / "corpus" / "manifest.tsv"


def _load_corpus(cfg: RunConfig):
    path = _corpus_manifest(cfg)
    if not path.is_file():
        raise ConfigError(f"corpus manifest not found at {path}; run `aro-lab synth-corpus` first")
    return load_manifest(path)


def _checkpoint_path(cfg: RunConfig, name: str) -> Path:
    return cfg.output / "models" / f"{name}.ckpt"


def _load_model(cfg: RunConfig, name: str, kind):
    path = _checkpoint_path(cfg, name)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found at {path}; run `aro-lab train --model {name}`")
    model = load_checkpoint(path)
    expected = MODEL_ARCH[name]
    if not isinstance(model, kind) or model.arch != expected:
        raise CheckpointError(f"{path} holds arch {model.arch!r}, expected {expected!r}")
    return model


def _triples(cfg: RunConfig, corpus, seed: int):
    out = make_triples(corpus, cfg["corpus"]["target_pool_size"], seed)
    limit = cfg["attack"]["limit"]
    return out[:limit] if limit > 0 else out


def _heldout(cfg: RunConfig) -> dict:
    return {n: _load_model(cfg, n, AsrModel) for n in cfg["eval"]["heldout"]}


# --- subcommands ------------------------------------------------------------------


def cmd_synth_corpus(cfg: RunConfig, args) -> int:
    c = cfg["corpus"]
    corpus = synth_corpus(c["word_count"], c["utterance_count"], c["seed"])
    out = cfg.output / "corpus"
    manifest = write_corpus(corpus, out)
    cfg.echo(out)
    print(json.dumps({"manifest": str(manifest), "utterances": len(corpus)}, sort_keys=True))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    m = cfg["models"]
    corpus = _load_corpus(cfg)
    hyper = {"epochs": m["epochs"], "batch_size": m["batch_size"],
             "learning_rate": m["learning_rate"]}
    arch = MODEL_ARCH[args.model]
    if arch == "SRM":
        model = train_srm(corpus, hyper, seed=m["seed"])
        summary = {"heldout_reconstruction_error": model.heldout_error_,
                   "taps": model.n_layers}
    else:
        model = train_asr(corpus, arch, hyper, seed=m["seed"], cer_gate=m["cer_gate"])
        summary = {"heldout_cer": model.heldout_cer_}
    summary.update(model=args.model, arch=arch, final_loss=model.history_[-1],
                   epochs=len(model.history_))
    out = cfg.output / "models"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, _checkpoint_path(cfg, args.model))
    _write_json(out / f"{args.model}.json", summary)
    cfg.echo(out / f"{args.model}-config")
    print(json.dumps(_finite(summary), sort_keys=True))
    return 0


def _attack_name(acfg: AttackConfig) -> str:
    return f"beta{acfg.beta:g}-layer{acfg.layer}-{acfg.optimizer}"


def cmd_attack(cfg: RunConfig, args) -> int:
    acfg = cfg.attack_config()
    corpus = _load_corpus(cfg)
    surrogate = _load_model(cfg, cfg["models"]["surrogate"], AsrModel)
    extractor = None
    if acfg.beta > 0:
        from .models import RepresentationExtractor

        extractor = RepresentationExtractor(_load_model(cfg, cfg["models"]["srm"], SrmModel),
                                            acfg.layer).fit()
    seed = cfg["attack"]["seed"]
    triples = _triples(cfg, corpus, seed)
    pairs = run_attacks(triples, surrogate, extractor, acfg, seed, cfg["attack"]["workers"])

    out = cfg.output / "attacks" / (args.name or _attack_name(acfg))
    for sub in ("wav", "traces", "clips"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for triple, res in pairs:
        rel = f"wav/{triple.id}.wav"
        write_wav(res.adversarial, out / rel)
        write_trace_csv(res, out / "traces" / f"{triple.id}.csv")
        _write_json(out / "clips" / f"{triple.id}.json", {
            "id": triple.id,
            "source_text": triple.source.transcript,
            "target_text": triple.target_text,
            "target_id": triple.target_audio.id,
            "surrogate_decode": res.surrogate_decode,
            "success": res.success,
            "iterations": res.iterations_run,
            "distortion_db": res.distortion,
            "snr_db": res.snr,
        })
        lines.append(f"{rel}\t{triple.source.transcript}\n")
    (out / "manifest.tsv").write_text("".join(lines), encoding="utf-8")
    snrs = [r.snr for _, r in pairs if math.isfinite(r.snr)]
    summary = {
        "triples": len(triples),
        "emitted": len(pairs),
        "skipped": len(triples) - len(pairs),
        "targeted_success": 100.0 * np.mean([r.success for _, r in pairs]) if pairs else 0.0,
        "median_snr_db": float(np.median(snrs)) if snrs else math.nan,
        "max_distortion_db": max((r.distortion for _, r in pairs), default=-math.inf),
    }
    _write_json(out / "summary.json", summary)
    cfg.echo(out)
    print(json.dumps(_finite(summary), sort_keys=True))
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    attacked_dir = Path(args.attacked)
    manifest = attacked_dir / "manifest.tsv"
    if not manifest.is_file():
        raise ConfigError(f"no manifest.tsv in {attacked_dir}")
    clips = load_manifest(manifest)
    if not clips:
        raise ManifestError(f"{attacked_dir} holds no attacked clips")
    names = _str_list(args.models) if args.models else cfg["eval"]["models"]
    for n in names:
        if n not in MODEL_ARCH or n == "srm":
            raise ConfigError(f"unknown ASR model {n!r}")
    models = {n: _load_model(cfg, n, AsrModel) for n in names}
    clean = None
    corpus_manifest = _corpus_manifest(cfg)
    if corpus_manifest.is_file():
        by_id = {u.id: u.clip for u in load_manifest(corpus_manifest)}
        if all(u.id in by_id for u in clips):
            clean = [by_id[u.id] for u in clips]
    label = attacked_dir.name
    report = transfer_matrix([u.clip for u in clips], [u.transcript for u in clips], models,
                             clean_clips=clean, label=label)
    out = cfg.output / "reports" / label
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    cfg.echo(out)
    for c in report.cells:
        print(f"{c.model}\tSRoA {c.sroa:.2f}%\tCER {c.cer:.2f}%\tWER {c.wer:.2f}%\tn={c.count}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    acfg = cfg.attack_config()
    corpus = _load_corpus(cfg)
    surrogate = _load_model(cfg, cfg["models"]["surrogate"], AsrModel)
    srm = _load_model(cfg, cfg["models"]["srm"], SrmModel)
    heldout = _heldout(cfg)
    seeds = cfg["eval"]["seeds"]

    def triples(seed):
        return _triples(cfg, corpus, seed)

    workers = cfg["attack"]["workers"]
    if args.axis == "beta":
        values = [float(v) for v in _str_list(args.values)] if args.values else [0.0, *DESK_BETAS]
        rows = sweep_beta(triples, values, acfg, surrogate, srm, heldout, seeds, workers)
    else:
        values = _int_list(args.values) if args.values else None
        if values and any(not 1 <= v <= srm.n_layers for v in values):
            raise ConfigError(f"layers must lie in 1..{srm.n_layers}")
        rows = sweep_layer(triples, acfg, surrogate, srm, heldout, seeds, values, workers)
    out = cfg.output / "sweeps" / (args.name or args.axis)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / f"{args.axis}.csv")
    write_sweep_json(rows, out / f"{args.axis}.json")
    cfg.echo(out)
    print((out / f"{args.axis}.csv").read_text(encoding="utf-8"), end="")
    return 0


# --- argument parsing ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aro-lab", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth-corpus", help="write the synthetic corpus (WAVs + manifest)")

    t = sub.add_parser("train", help="train one model and write its checkpoint")
    t.add_argument("--model", required=True, choices=sorted(MODEL_ARCH))

    a = sub.add_parser("attack", help="attack every triple with the surrogate")
    a.add_argument("--beta", type=float)
    a.add_argument("--layer", type=int)
    a.add_argument("--optimizer", choices=["adam", "sign_descent"])
    a.add_argument("--no-aro", action="store_true", help="same as --beta 0")
    a.add_argument("--seed", type=int)
    a.add_argument("--name", help="output subdirectory (default derived from the config)")

    e = sub.add_parser("evaluate", help="transfer report for a directory of attacked clips")
    e.add_argument("--attacked", required=True)
    e.add_argument("--models", help="comma-separated model names, e.g. asr-b,asr-c")

    s = sub.add_parser("sweep", help="beta or layer sweep over the eval seeds")
    s.add_argument("--axis", required=True, choices=["beta", "layer"])
    s.add_argument("--values", help="comma-separated values")
    s.add_argument("--name")
    return p


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "beta", None) is not None:
        out[("attack", "beta")] = args.beta
    if getattr(args, "no_aro", False):
        if getattr(args, "beta", None) not in (None, 0.0):
            raise ConfigError("--no-aro conflicts with a non-zero --beta")
        out[("attack", "beta")] = 0.0
    if getattr(args, "layer", None) is not None:
        out[("attack", "layer")] = args.layer
    if getattr(args, "optimizer", None) is not None:
        out[("attack", "optimizer")] = args.optimizer
    if getattr(args, "seed", None) is not None:
        out[("attack", "seed")] = args.seed
    return out


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"aro-lab: config error: {exc}", file=sys.stderr)
        return 1
    except (AroLabError, OSError) as exc:
        print(f"aro-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
