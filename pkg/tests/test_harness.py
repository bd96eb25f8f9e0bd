import csv
import json
import math

import numpy as np
import pytest
from helpers import untrained_asr, untrained_srm

from aro_lab.attack import AttackConfig
from aro_lab.audio import AudioClip
from aro_lab.corpus import make_triples
from aro_lab.exceptions import SampleRateMismatchError
from aro_lab.harness import (
    DESK_BETAS,
    REFERENCE_BETAS,
    TransferReport,
    clip_seed,
    evaluate_attacks,
    run_attacks,
    sweep_beta,
    sweep_layer,
    transfer_matrix,
    write_sweep_csv,
    write_sweep_json,
)
from aro_lab.metrics import cer


class Echo:
    """Stub recognizer returning fixed transcripts in order."""

    sample_rate = 8000

    def __init__(self, outputs):
        self.outputs = outputs

    def predict(self, clips):
        return list(self.outputs[: len(clips)])


def _clips(n, rate=8000):
    return [AudioClip(f"c{i}", rate, np.full(800, 0.1)) for i in range(n)]


def test_transfer_matrix_cells():
    refs = ["hello", "ab", "cat"]
    models = {"good": Echo(refs), "bad": Echo(["hallo", "xyzw", "dog"])}
    rep = transfer_matrix(_clips(3), refs, models, label="clean")
    assert [c.model for c in rep.cells] == ["good", "bad"]
    good, bad = rep.cell("clean", "good"), rep.cell("clean", "bad")
    assert good.sroa == 0.0 and good.cer == 0.0 and good.count == 3
    assert bad.cer == pytest.approx(np.mean([20.0, 200.0, 100.0]))
    assert bad.sroa == pytest.approx(200 / 3)  # "hallo" is 20%, not a success
    assert math.isnan(bad.snr)
    assert rep.transfer_sroa("clean", ["good", "bad"]) == pytest.approx(100 / 3)


def test_transfer_matrix_snr_and_errors():
    clean = _clips(2)
    attacked = [c.with_samples(c.samples + 0.01) for c in clean]
    rep = transfer_matrix(attacked, ["a", "b"], {"m": Echo(["a", "b"])}, clean_clips=clean)
    assert rep.cells[0].snr == pytest.approx(20.0)
    with pytest.raises(SampleRateMismatchError):
        transfer_matrix(_clips(2, rate=16000), ["a", "b"], {"m": Echo(["a", "b"])})
    with pytest.raises(ValueError):
        transfer_matrix(_clips(2), ["a"], {"m": Echo(["a"])})


def test_report_files(tmp_path):
    rep = transfer_matrix(_clips(2), ["ab", "cd"], {"m": Echo(["ab", "xy"])}, label="x")
    rep.targeted["x"] = 50.0
    rep.to_csv(tmp_path / "r.csv")
    rep.to_json(tmp_path / "r.json")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["config", "model", "sroa", "cer", "wer", "snr", "count"]
    assert rows[1][:3] == ["x", "m", "50.0"] and rows[1][5] == ""
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["cells"][0]["snr"] is None and doc["targeted_success"] == {"x": 50.0}


def test_clip_seed_is_order_free():
    assert clip_seed(3, "utt0001") == clip_seed(3, "utt0001")
    assert clip_seed(3, "utt0001") != clip_seed(3, "utt0002")
    assert clip_seed(3, "utt0001") != clip_seed(4, "utt0001")


def test_desk_grid_rescales_the_reference_grid():
    assert REFERENCE_BETAS == (120.0, 150.0, 180.0, 220.0)
    assert DESK_BETAS[2] == pytest.approx(10.0)
    np.testing.assert_allclose(np.array(DESK_BETAS) / np.array(REFERENCE_BETAS), DESK_BETAS[0] / 120)


@pytest.fixture(scope="module")
def small_setup(corpus):
    triples = make_triples(corpus[:40], 8, 0)[:3]
    heldout = {"asr-b": untrained_asr("B"), "asr-c": untrained_asr("C")}
    return triples, untrained_asr("A"), untrained_srm(), heldout


def test_run_attacks_is_order_independent(small_setup):
    triples, f, _, _ = small_setup
    cfg = AttackConfig(max_iters=2, beta=0.0)
    forward = run_attacks(triples, f, None, cfg, seed=1)
    backward = run_attacks(triples[::-1], f, None, cfg, seed=1)
    for (t, a), (u, b) in zip(forward, backward[::-1]):
        assert t.id == u.id and np.array_equal(a.delta.delta, b.delta.delta)


def test_evaluate_attacks_reports_targeted(small_setup):
    triples, f, _, heldout = small_setup
    pairs = run_attacks(triples, f, None, AttackConfig(max_iters=2), seed=0)
    rep = evaluate_attacks(pairs, heldout, label="run")
    assert set(rep.targeted) == {"run"}
    for c in rep.cells:
        assert c.count == len(pairs)
        hyps = heldout[c.model].predict([r.adversarial for _, r in pairs])
        expected = np.mean([cer(t.source.transcript, h) for (t, _), h in zip(pairs, hyps)])
        assert c.cer == pytest.approx(expected)


def test_sweep_beta_rows(small_setup, tmp_path):
    triples, f, srm, heldout = small_setup
    cfg = AttackConfig(max_iters=2)
    rows = sweep_beta(triples, [0.0, 1.0], cfg, f, srm, heldout, seeds=(0, 1))
    assert [r.value for r in rows] == [0.0, 1.0]
    assert all(r.count == 2 * len(triples) for r in rows)
    assert set(rows[0].per_model) == {"asr-b", "asr-c"}
    assert rows[0].sroa == pytest.approx(np.mean(list(rows[0].per_model.values())))
    write_sweep_csv(rows, tmp_path / "s.csv")
    write_sweep_json(rows, tmp_path / "s.json")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "beta,sroa,sroa_asr-b,sroa_asr-c,targeted,snr_mean,snr_median,count"
    assert len(lines) == 3
    assert len(json.loads((tmp_path / "s.json").read_text())) == 2
    with pytest.raises(ValueError):
        sweep_beta(triples, [], cfg, f, srm, heldout)


def test_sweep_beta_zero_row_is_the_baseline(small_setup):
    triples, f, srm, heldout = small_setup
    cfg = AttackConfig(max_iters=3, beta=0.0)
    row = sweep_beta(triples, [0.0], cfg, f, srm, heldout, seeds=(0,))[0]
    pairs = run_attacks(triples, f, None, cfg, seed=0)
    base = evaluate_attacks(pairs, heldout, "b")
    assert row.per_model == {m: base.cell("b", m).sroa for m in heldout}


def test_sweep_layer_rows(small_setup, tmp_path):
    triples, f, srm, heldout = small_setup
    rows = sweep_layer(triples, AttackConfig(max_iters=1, beta=1.0), f, srm, heldout, seeds=(0,))
    assert [r.value for r in rows] == [1, 2, 3, 4]
    write_sweep_csv(rows, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[1].startswith("1,")
    with pytest.raises(ValueError):
        sweep_layer(triples, AttackConfig(beta=0.0), f, srm, heldout)


def test_empty_report_helpers():
    rep = TransferReport()
    with pytest.raises(KeyError):
        rep.cell("a", "b")
    with pytest.raises(ValueError):
        evaluate_attacks([], {}, "x")
