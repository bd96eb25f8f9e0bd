"""Small CTC speech recognizers and a masked-frame speech representation encoder.

Both families are scikit-learn style estimators. Their forward passes are
built from :mod:`aro_lab.diffgraph` ops so gradients reach raw samples.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import diffgraph as dg
from .ctc import ctc_loss, greedy_decode, min_frames
from .exceptions import CheckpointError, ClipTooShortError, TrainingFailureError, UnknownArchError
from .features import FeatureConfig, extract, feature_dim
from .metrics import cer
from .optim import MultiAdam
from .validation import VOCAB, check_clips, check_random_state, decode_tokens, encode_text

log = logging.getLogger(__name__)

VOCAB_SIZE = len(VOCAB)


@dataclass(frozen=True)
class ArchSpec:
    features: str
    context: int
    hidden: tuple[int, ...]
    activation: str


ARCHS = {
    "A": ArchSpec("mfcc", 3, (128, 128), "tanh"),
    "B": ArchSpec("logmel", 5, (96, 96, 96), "relu"),
    "C": ArchSpec("mfcc", 2, (256,), "tanh"),
}
SRM_ARCH = "SRM"

_ACTIVATIONS = {"tanh": dg.tanh, "relu": dg.relu}


def _context_index(num_frames: int, context: int) -> np.ndarray:
    offsets = np.arange(-context, context + 1)
    return np.clip(np.arange(num_frames)[:, None] + offsets[None, :], 0, num_frames - 1)


def stack_context(feats: dg.Node, context: int) -> dg.Node:
    """(T, D) -> (T, (2c+1)*D), edge frames replicated."""
    t, d = feats.shape
    stacked = dg.take(feats, _context_index(t, context))
    return dg.reshape(stacked, (t, (2 * context + 1) * d))


def _stack_context_np(feats: np.ndarray, context: int) -> np.ndarray:
    t, d = feats.shape
    return feats[_context_index(t, context)].reshape(t, (2 * context + 1) * d)


def _normalize(feats: dg.Node, mean: np.ndarray, std: np.ndarray) -> dg.Node:
    centred = dg.add_bias(feats, dg.constant(-mean))
    return dg.mul(centred, dg.constant(np.broadcast_to(1.0 / std, feats.shape)))


def _glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def _as_samples(samples) -> dg.Node:
    if isinstance(samples, dg.Node):
        return samples
    return dg.constant(getattr(samples, "samples", samples))


def _feature_stats(feature_list) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate(feature_list, axis=0)
    return allf.mean(axis=0), np.maximum(allf.std(axis=0), 1e-3)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _FittedMixin:
    def _check_fitted(self):
        if getattr(self, "params_", None) is None:
            raise NotFittedError(f"{type(self).__name__} is not fitted")


class AsrModel(_FittedMixin, BaseEstimator):
    """Frame-stacking MLP recognizer trained with CTC.

    ``arch`` selects the front-end, context width, depth, width and
    nonlinearity from :data:`ARCHS`.
    """

    def __init__(self, arch="A", epochs=30, batch_size=8, learning_rate=1e-3, seed=0,
                 sample_rate=8000):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.sample_rate = sample_rate

    # -- structure ----------------------------------------------------------

    @property
    def spec(self) -> ArchSpec:
        try:
            return ARCHS[self.arch]
        except KeyError:
            raise UnknownArchError(f"unknown ASR architecture {self.arch!r}") from None

    @property
    def front_end(self) -> FeatureConfig:
        return FeatureConfig(sample_rate=self.sample_rate)

    @property
    def input_dim(self) -> int:
        spec = self.spec
        return (2 * spec.context + 1) * feature_dim(self.front_end, spec.features)

    def layer_shapes(self) -> list[tuple[int, ...]]:
        dims = [self.input_dim, *self.spec.hidden, VOCAB_SIZE + 1]
        shapes = []
        for a, b in zip(dims, dims[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def param_shapes(self) -> list[tuple[int, ...]]:
        d = feature_dim(self.front_end, self.spec.features)
        return [(d,), (d,), *self.layer_shapes()]

    def init_params(self, rng=None) -> list[np.ndarray]:
        rng = check_random_state(self.seed if rng is None else rng)
        d = feature_dim(self.front_end, self.spec.features)
        params = [np.zeros(d), np.ones(d)]
        for shape in self.layer_shapes():
            params.append(_glorot(rng, *shape) if len(shape) == 2 else np.zeros(shape))
        return params

    def set_params_arrays(self, params) -> "AsrModel":
        shapes = self.param_shapes()
        if [tuple(p.shape) for p in params] != shapes:
            raise CheckpointError(f"parameter shapes do not match arch {self.arch}")
        self.params_ = [np.array(p, dtype=np.float64) for p in params]
        return self

    # -- forward ------------------------------------------------------------

    def features(self, samples) -> dg.Node:
        return extract(_as_samples(samples), self.front_end, self.spec.features)

    def _mlp(self, x: dg.Node, weights) -> dg.Node:
        act = _ACTIVATIONS[self.spec.activation]
        n_layers = len(weights) // 2
        for i in range(n_layers):
            x = dg.add_bias(dg.matmul(x, weights[2 * i]), weights[2 * i + 1])
            if i < n_layers - 1:
                x = act(x)
        return dg.log_softmax(x)

    def forward(self, samples) -> dg.Node:
        """Raw samples (array, clip or node) -> (T, V+1) log-probability lattice."""
        self._check_fitted()
        mean, std, *weights = self.params_
        feats = _normalize(self.features(samples), mean, std)
        x = stack_context(feats, self.spec.context)
        return self._mlp(x, [dg.constant(w) for w in weights])

    def predict_lattice(self, clip) -> np.ndarray:
        return self.forward(clip).value

    def predict(self, X) -> list[str]:
        clips = check_clips(X, self.sample_rate)
        return [decode_tokens(greedy_decode(self.predict_lattice(c))) for c in clips]

    def mean_cer(self, X, y) -> float:
        hyps = self.predict(X)
        return float(np.mean([cer(r, h) for r, h in zip(y, hyps)]))

    # -- training -----------------------------------------------------------

    def fit(self, X, y):
        clips = check_clips(X, self.sample_rate)
        targets = [encode_text(t) for t in y]
        if not clips or len(clips) != len(targets):
            raise ValueError("need one transcript per clip and at least one clip")
        rng = check_random_state(self.seed)
        spec = self.spec
        raw = [self.features(c).value for c in clips]
        for c, f, t in zip(clips, raw, targets):
            if f.shape[0] < min_frames(t):
                raise ClipTooShortError(f"clip {c.id!r} is too short for its transcript")
        mean, std = _feature_stats(raw)
        inputs = [_stack_context_np((f - mean) / std, spec.context) for f in raw]
        weights = self.init_params(rng)[2:]
        opt = MultiAdam.for_params(weights)
        self.history_ = []
        for epoch in range(self.epochs):
            total = 0.0
            for batch in _batches(len(inputs), self.batch_size, rng):
                leaves = [dg.leaf(w) for w in weights]
                x = dg.constant(np.concatenate([inputs[i] for i in batch]))
                logp = self._mlp(x, leaves)
                losses = []
                start = 0
                for i in batch:
                    n = inputs[i].shape[0]
                    losses.append(ctc_loss(dg.slice(logp, np.s_[start : start + n]), targets[i]))
                    start += n
                loss = dg.scalar_mul(_sum_nodes(losses), 1.0 / len(batch))
                if not np.isfinite(loss.item()):
                    raise TrainingFailureError(f"ASR {self.arch}: loss diverged in epoch {epoch}")
                grads = dg.backward(loss)
                weights = opt.step(weights, [grads[lf] for lf in leaves], self.learning_rate)
                total += loss.item() * len(batch)
            self.history_.append(total / len(inputs))
            log.debug("asr %s epoch %d loss %.4f", self.arch, epoch, self.history_[-1])
        self.params_ = [mean, std, *weights]
        return self


def _sum_nodes(nodes):
    out = nodes[0]
    for n in nodes[1:]:
        out = dg.add(out, n)
    return out


class SrmModel(_FittedMixin, TransformerMixin, BaseEstimator):
    """Log-mel encoder of ``n_layers`` tanh blocks trained by masked-frame prediction.

    A linear head reconstructs the normalized log-mel frame at masked
    positions from the top block. Every block output is a tap point.
    """

    def __init__(self, n_layers=4, hidden_dim=64, context=2, mask_rate=0.15, epochs=30,
                 batch_size=8, learning_rate=1e-3, seed=0, sample_rate=8000):
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.context = context
        self.mask_rate = mask_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.sample_rate = sample_rate

    arch = SRM_ARCH

    @property
    def front_end(self) -> FeatureConfig:
        return FeatureConfig(sample_rate=self.sample_rate)

    @property
    def n_mels(self) -> int:
        return self.front_end.mel_bands

    def param_shapes(self) -> list[tuple[int, ...]]:
        m = self.n_mels
        dims = [(2 * self.context + 1) * m] + [self.hidden_dim] * self.n_layers
        shapes = [(m,), (m,)]
        for a, b in zip(dims, dims[1:]):
            shapes += [(a, b), (b,)]
        return shapes + [(self.hidden_dim, m), (m,)]

    def init_params(self, rng=None) -> list[np.ndarray]:
        rng = check_random_state(self.seed if rng is None else rng)
        params = [np.zeros(self.n_mels), np.ones(self.n_mels)]
        for shape in self.param_shapes()[2:]:
            params.append(_glorot(rng, *shape) if len(shape) == 2 else np.zeros(shape))
        return params

    def set_params_arrays(self, params) -> "SrmModel":
        if self.n_layers < 3:
            raise ValueError("the encoder needs at least 3 layers")
        if [tuple(p.shape) for p in params] != self.param_shapes():
            raise CheckpointError("parameter shapes do not match the SRM configuration")
        self.params_ = [np.array(p, dtype=np.float64) for p in params]
        return self

    def _blocks(self, x: dg.Node, weights, upto: int) -> list[dg.Node]:
        states = []
        for i in range(upto):
            x = dg.tanh(dg.add_bias(dg.matmul(x, weights[2 * i]), weights[2 * i + 1]))
            states.append(x)
        return states

    def hidden_states(self, samples, upto: int | None = None) -> list[dg.Node]:
        """Block outputs 1..upto (default all), each (T, hidden_dim)."""
        self._check_fitted()
        upto = self.n_layers if upto is None else upto
        mean, std, *rest = self.params_
        lm = extract(_as_samples(samples), self.front_end, "logmel")
        x = stack_context(_normalize(lm, mean, std), self.context)
        return self._blocks(x, [dg.constant(w) for w in rest[: 2 * self.n_layers]], upto)

    def transform(self, X) -> list[np.ndarray]:
        return [self.hidden_states(c)[-1].value for c in check_clips(X, self.sample_rate)]

    # -- masked-frame objective --------------------------------------------

    def _draw_mask(self, rng, num_frames: int) -> np.ndarray:
        mask = rng.random(num_frames) < self.mask_rate
        if not mask.any():
            mask[rng.integers(num_frames)] = True
        return mask

    def _masked_batch(self, normed, rng):
        inputs, targets, rows = [], [], []
        offset = 0
        for f in normed:
            mask = self._draw_mask(rng, f.shape[0])
            corrupted = np.where(mask[:, None], 0.0, f)
            inputs.append(_stack_context_np(corrupted, self.context))
            targets.append(f[mask])
            rows.append(offset + np.flatnonzero(mask))
            offset += f.shape[0]
        return np.concatenate(inputs), np.concatenate(targets), np.concatenate(rows)

    def _masked_loss(self, x, target, rows, weights) -> dg.Node:
        top = self._blocks(dg.constant(x), weights, self.n_layers)[-1]
        picked = dg.take(top, rows)
        pred = dg.add_bias(dg.matmul(picked, weights[-2]), weights[-1])
        err = dg.sub(pred, dg.constant(target))
        return dg.scalar_mul(dg.sum(dg.square(err)), 1.0 / target.size)

    def _normed(self, clips):
        mean, std = self.params_[0], self.params_[1]
        return [(extract(c.samples, self.front_end, "logmel").value - mean) / std for c in clips]

    def reconstruction_error(self, X, seed=0) -> float:
        """Mean squared error on a seeded 15%-style masking of ``X`` (normalized log-mel units)."""
        self._check_fitted()
        rng = check_random_state(seed)
        x, target, rows = self._masked_batch(self._normed(check_clips(X, self.sample_rate)), rng)
        return self._masked_loss(x, target, rows, [dg.constant(w) for w in self.params_[2:]]).item()

    def fit(self, X, y=None):
        if self.n_layers < 3:
            raise ValueError("the encoder needs at least 3 layers")
        clips = check_clips(X, self.sample_rate)
        if not clips:
            raise ValueError("cannot fit on an empty corpus")
        rng = check_random_state(self.seed)
        raw = [extract(c.samples, self.front_end, "logmel").value for c in clips]
        mean, std = _feature_stats(raw)
        normed = [(f - mean) / std for f in raw]
        weights = self.init_params(rng)[2:]
        opt = MultiAdam.for_params(weights)
        self.history_ = []
        for epoch in range(self.epochs):
            total = 0.0
            batches = _batches(len(normed), self.batch_size, rng)
            for batch in batches:
                x, target, rows = self._masked_batch([normed[i] for i in batch], rng)
                leaves = [dg.leaf(w) for w in weights]
                loss = self._masked_loss(x, target, rows, leaves)
                if not np.isfinite(loss.item()):
                    raise TrainingFailureError(f"SRM loss diverged in epoch {epoch}")
                grads = dg.backward(loss)
                weights = opt.step(weights, [grads[lf] for lf in leaves], self.learning_rate)
                total += loss.item()
            self.history_.append(total / len(batches))
            log.debug("srm epoch %d loss %.4f", epoch, self.history_[-1])
        self.params_ = [mean, std, *weights]
        return self


class RepresentationExtractor(TransformerMixin, BaseEstimator):
    """Taps block ``layer`` (1-based) of a fitted :class:`SrmModel`."""

    def __init__(self, srm=None, layer=1):
        self.srm = srm
        self.layer = layer

    def _check(self):
        if self.srm is None:
            raise NotFittedError("RepresentationExtractor needs an SrmModel")
        if not 1 <= self.layer <= self.srm.n_layers:
            raise ValueError(f"layer {self.layer} outside [1, {self.srm.n_layers}]")

    def fit(self, X=None, y=None):
        self._check()
        return self

    def forward(self, samples) -> dg.Node:
        self._check()
        return self.srm.hidden_states(samples, upto=self.layer)[-1]

    def pooled(self, samples) -> dg.Node:
        """Time-averaged representation vector."""
        return dg.mean(self.forward(samples), axis=0)

    def transform(self, X) -> list[np.ndarray]:
        return [self.forward(c).value for c in check_clips(X, self.srm.sample_rate)]


def srm_forward(extractor: RepresentationExtractor, clip) -> np.ndarray:
    return extractor.forward(clip).value


def asr_forward(model: AsrModel, clip) -> np.ndarray:
    return model.predict_lattice(clip)


# --- training entry points ----------------------------------------------------


def train_asr(corpus, arch="A", hyper=None, seed=0, holdout_fraction=0.2, cer_gate=15.0):
    """Fit an ASR model on a seeded split of ``corpus`` and enforce the held-out CER gate."""
    from .corpus import split_corpus

    hyper = dict(hyper or {})
    n_hold = max(1, int(round(len(corpus) * holdout_fraction)))
    train, held = split_corpus(corpus, n_hold, seed)
    model = AsrModel(arch=arch, seed=seed, **hyper)
    model.fit([u.clip for u in train], [u.transcript for u in train])
    model.heldout_cer_ = model.mean_cer([u.clip for u in held], [u.transcript for u in held])
    log.info("asr %s held-out CER %.2f%%", arch, model.heldout_cer_)
    if cer_gate is not None and model.heldout_cer_ > cer_gate:
        raise TrainingFailureError(
            f"ASR {arch}: held-out CER {model.heldout_cer_:.2f}% exceeds the {cer_gate}% gate"
        )
    return model


def train_srm(corpus, hyper=None, seed=0, holdout_fraction=0.2):
    from .corpus import split_corpus

    hyper = dict(hyper or {})
    n_hold = max(1, int(round(len(corpus) * holdout_fraction)))
    train, held = split_corpus(corpus, n_hold, seed)
    model = SrmModel(seed=seed, **hyper).fit([u.clip for u in train])
    model.heldout_error_ = model.reconstruction_error([u.clip for u in held], seed)
    return model


# --- checkpoints ----------------------------------------------------------------

_MAGIC = b"AROCKPT1"


def save_checkpoint(model, path) -> None:
    """Text header line + JSON header + little-endian float64 payload."""
    model._check_fitted()
    tensors = model.params_
    header = {
        "kind": "srm" if isinstance(model, SrmModel) else "asr",
        "arch": model.arch,
        "params": model.get_params(),
        "front_end": model.front_end.to_dict(),
        "shapes": [list(t.shape) for t in tensors],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in tensors)
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC + b" " + str(len(header_bytes)).encode() + b"\n")
        fh.write(header_bytes)
        fh.write(payload)


def read_checkpoint_header(path) -> dict:
    return _parse_checkpoint(Path(path).read_bytes())[0]


def _parse_checkpoint(data: bytes):
    nl = data.find(b"\n")
    first = data[:nl].split(b" ") if nl > 0 else []
    if len(first) != 2 or first[0] != _MAGIC or not first[1].isdigit():
        raise CheckpointError("not an aro-lab checkpoint")
    n = int(first[1])
    raw_header = data[nl + 1 : nl + 1 + n]
    if len(raw_header) != n:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw_header)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    return header, data[nl + 1 + n :]


def load_checkpoint(path):
    header, payload = _parse_checkpoint(Path(path).read_bytes())
    arch = header.get("arch")
    if header.get("kind") == "srm" and arch == SRM_ARCH:
        model = SrmModel(**header["params"])
    elif header.get("kind") == "asr" and arch in ARCHS:
        model = AsrModel(**header["params"])
    else:
        raise UnknownArchError(f"unknown architecture tag {arch!r}")
    shapes = [tuple(s) for s in header["shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(payload) != 8 * sum(sizes):
        raise CheckpointError(
            f"payload has {len(payload)} bytes, header declares {8 * sum(sizes)}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    tensors, start = [], 0
    for shape, size in zip(shapes, sizes):
        tensors.append(flat[start : start + size].reshape(shape).astype(np.float64))
        start += size
    return model.set_params_arrays(tensors)
