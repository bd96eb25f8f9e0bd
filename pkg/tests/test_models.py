import math

import numpy as np
import pytest
from helpers import noise_clip, untrained_asr, untrained_srm

from aro_lab import diffgraph as dg
from aro_lab.exceptions import CheckpointError, TrainingFailureError, UnknownArchError
from aro_lab.models import (
    ARCHS,
    AsrModel,
    RepresentationExtractor,
    SrmModel,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    stack_context,
    train_asr,
)
from aro_lab.validation import BLANK


def test_arch_shapes_are_distinct():
    shapes = {a: AsrModel(a).param_shapes() for a in ARCHS}
    assert shapes["A"] != shapes["B"] != shapes["C"] != shapes["A"]
    depth = {a: len(ARCHS[a].hidden) for a in ARCHS}
    assert depth["A"] != depth["B"] != depth["C"]


def test_unknown_arch():
    with pytest.raises(UnknownArchError):
        AsrModel("Z").param_shapes()


@pytest.mark.parametrize("arch", sorted(ARCHS))
def test_zero_weights_give_uniform_rows(arch):
    m = AsrModel(arch)
    params = [np.zeros(s) for s in m.param_shapes()]
    params[1] = np.ones_like(params[1])  # feature std
    m.set_params_arrays(params)
    lat = m.predict_lattice(noise_clip(1200))
    assert lat.shape == (m.front_end.num_frames(1200), BLANK + 1)
    np.testing.assert_allclose(lat, -math.log(BLANK + 1), atol=1e-12)


def test_stack_context_edges_and_gradient():
    feats = np.arange(12.0).reshape(4, 3)
    out = stack_context(dg.constant(feats), 1).value
    assert out.shape == (4, 9)
    np.testing.assert_array_equal(out[0], np.r_[feats[0], feats[0], feats[1]])
    np.testing.assert_array_equal(out[3], np.r_[feats[2], feats[3], feats[3]])
    w = dg.constant(np.random.default_rng(0).normal(size=(4, 9)))
    err = dg.finite_diff_check(lambda n: dg.sum(dg.mul(stack_context(n, 1), w)), feats)
    assert err < 1e-6


@pytest.mark.parametrize("arch", sorted(ARCHS))
def test_asr_forward_differentiable_to_samples(arch):
    m = untrained_asr(arch)
    clip = noise_clip(560, seed=1)
    w = dg.constant(np.random.default_rng(2).normal(size=m.predict_lattice(clip).shape))
    err = dg.finite_diff_check(lambda n: dg.sum(dg.mul(m.forward(n), w)), clip.samples)
    assert err < 1e-4


def test_srm_taps_and_gradient():
    srm = untrained_srm()
    clip = noise_clip(560, seed=3)
    states = srm.hidden_states(clip)
    assert len(states) == 4
    assert all(s.shape == (states[0].shape[0], 64) for s in states)
    for i in range(3):
        assert not np.array_equal(states[i].value, states[i + 1].value)
    ext = RepresentationExtractor(srm, layer=2)
    np.testing.assert_array_equal(ext.forward(clip).value, states[1].value)
    w = dg.constant(np.random.default_rng(4).normal(size=64))
    err = dg.finite_diff_check(lambda n: dg.sum(dg.mul(ext.pooled(n), w)), clip.samples)
    assert err < 1e-4


def test_extractor_rejects_bad_layer():
    with pytest.raises(ValueError):
        RepresentationExtractor(untrained_srm(), layer=5).fit()


def test_forward_is_deterministic():
    m = untrained_asr("B")
    clip = noise_clip(900)
    assert np.array_equal(m.predict_lattice(clip), m.predict_lattice(clip))


def test_estimator_params():
    m = AsrModel("C", epochs=3)
    assert m.get_params()["epochs"] == 3
    assert m.set_params(arch="B").arch == "B"
    with pytest.raises(Exception):
        AsrModel().predict_lattice(noise_clip())  # not fitted


def test_training_is_deterministic(corpus, tmp_path):
    small = corpus[:40]
    clips, texts = [u.clip for u in small], [u.transcript for u in small]
    a = AsrModel("C", epochs=2, seed=5).fit(clips, texts)
    b = AsrModel("C", epochs=2, seed=5).fit(clips, texts)
    save_checkpoint(a, tmp_path / "a.ckpt")
    save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    c = AsrModel("C", epochs=2, seed=6).fit(clips, texts)
    assert not np.array_equal(a.params_[2], c.params_[2])


def test_srm_training_is_deterministic(corpus):
    clips = [u.clip for u in corpus[:30]]
    a = SrmModel(epochs=2, seed=1).fit(clips)
    b = SrmModel(epochs=2, seed=1).fit(clips)
    assert all(np.array_equal(x, y) for x, y in zip(a.params_, b.params_))


def test_training_gate(corpus):
    with pytest.raises(TrainingFailureError):
        train_asr(corpus[:30], "A", {"epochs": 1}, seed=0, cer_gate=0.0)


@pytest.mark.parametrize("factory", [lambda: untrained_asr("B"), untrained_srm])
def test_checkpoint_round_trip(tmp_path, factory):
    m = factory()
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert type(back) is type(m) and back.get_params() == m.get_params()
    clip = noise_clip(900)
    if isinstance(m, AsrModel):
        assert np.array_equal(back.predict_lattice(clip), m.predict_lattice(clip))
    else:
        assert np.array_equal(back.transform([clip])[0], m.transform([clip])[0])
    assert read_checkpoint_header(path)["kind"] in ("asr", "srm")


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(untrained_asr(), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(path)


def test_checkpoint_unknown_arch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(untrained_asr(), path)
    data = path.read_bytes()
    patched = data.replace(b'"arch": "A"', b'"arch": "Z"')
    assert patched != data
    path.write_bytes(patched)
    with pytest.raises(UnknownArchError):
        load_checkpoint(path)


def test_checkpoint_garbage(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@pytest.mark.slow
def test_trained_models_pass_gate(trained):
    for arch in "ABC":
        assert trained[arch].heldout_cer_ <= 15.0


@pytest.mark.slow
def test_srm_beats_untrained_baseline(corpus, trained):
    from aro_lab.corpus import split_corpus

    _, held = split_corpus(corpus, 50, 0)
    clips = [u.clip for u in held]
    baseline = SrmModel(seed=0)
    baseline.set_params_arrays(baseline.init_params())
    srm = trained["SRM"]
    # the untrained encoder shares the trained feature normalization
    baseline.params_[:2] = [p.copy() for p in srm.params_[:2]]
    assert srm.reconstruction_error(clips) < baseline.reconstruction_error(clips)
