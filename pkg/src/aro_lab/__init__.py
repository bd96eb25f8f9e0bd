"""Desk-scale targeted audio adversarial examples with acoustic representation alignment.

Typical flow::

    corpus = synth_corpus(seed=0)
    surrogate = train_asr(corpus, "A")
    srm = train_srm(corpus)
    result = AROAttack(surrogate, srm, beta=10.0).attack(make_triples(corpus)[0])
"""

from .attack import AROAttack, AttackConfig, AttackResult, run_attack
from .audio import AudioClip, Perturbation, distortion_db, peak_db, read_wav, snr_db, write_wav
from .corpus import AttackTriple, Utterance, load_manifest, make_triples, synth_corpus
from .harness import TransferReport, sweep_beta, sweep_layer, transfer_matrix
from .metrics import cer, edit_distance, sroa, untargeted_success, wer
from .models import (
    AsrModel,
    RepresentationExtractor,
    SrmModel,
    load_checkpoint,
    save_checkpoint,
    train_asr,
    train_srm,
)

__version__ = "0.1.0"

__all__ = [
    "AROAttack", "AsrModel", "AttackConfig", "AttackResult", "AttackTriple", "AudioClip",
    "Perturbation", "RepresentationExtractor", "SrmModel", "TransferReport", "Utterance",
    "cer", "distortion_db", "edit_distance", "load_checkpoint", "load_manifest",
    "make_triples", "peak_db", "read_wav", "run_attack", "save_checkpoint", "snr_db",
    "sroa", "sweep_beta", "sweep_layer", "synth_corpus", "train_asr", "train_srm",
    "transfer_matrix", "untargeted_success", "wer", "write_wav",
]
