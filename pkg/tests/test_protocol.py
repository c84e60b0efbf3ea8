import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from hefl import neural
from hefl.bus import MessageBus, fingerprint
from hefl.config import load_config
from hefl.errors import EmptyEvalSet, PhaseError, SessionAbort
from hefl.federated import FLConfig
from hefl.ledger import NodeSet, load_chain, validate_chain, verify_and_append_model
from hefl.neural import Dense, LabeledDataset, ModelSpec, Softmax
from hefl.protocol import (
    HospitalActor, cross_evaluate, do_session, mo_session, privacy_audit, run_dir_name, run_scenario,
)
from hefl.ring import DEFAULT_CODEC, encode_fixed
from hefl.secure_ops import reveal
from hefl.sharing import Dealer, Session

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SPEC = ModelSpec((Dense(3, 2), Softmax()), (3,))


def hospital(i, n_val, verified=True, seed=0):
    rng = np.random.default_rng(seed + i)
    bus_nodes = NodeSet(f"H{i}/B", 3)
    model = neural.init_params(SPEC, rng, model_id=f"H{i}-gm")
    if verified:
        verify_and_append_model(bus_nodes, model)
    val = LabeledDataset(rng.uniform(-1, 1, size=(n_val, 3)), rng.integers(0, 2, size=n_val), 2)
    return HospitalActor(i, f"H{i}", SPEC, [], FLConfig(participants_per_round=1), bus_nodes, val, model)


def session(h, bus, seed=0):
    return Session([f"H{i}" for i in range(h)], Dealer(h, seed), bus, session_id="t")


def test_mo_session_two_parties_matches_quantized_forward():
    bus = MessageBus()
    mo, do = hospital(0, 0), hospital(1, 4)
    s = session(2, bus)
    x, y = do_session(do, mo, s, do.validation, DEFAULT_CODEC)
    mat, labels = mo_session(mo, s, [(x, y)], DEFAULT_CODEC)
    want = neural.import_probabilities(neural.quantized_logits(mo.model, do.validation.inputs))
    assert mat.rows.shape == (4, 2)
    assert np.max(np.abs(mat.rows - want)) < 1e-4
    assert np.array_equal(labels, do.validation.labels)

    forbidden = {fingerprint(t) for t in mo.model.tensors}
    forbidden |= {fingerprint(np.asarray(encode_fixed(t))) for t in mo.model.tensors}
    forbidden |= {fingerprint(do.validation.inputs), fingerprint(np.asarray(encode_fixed(do.validation.inputs)))}
    assert not bus.log.digests() & forbidden
    assert privacy_audit(bus.log, forbidden) == []
    assert {m.kind for m in bus.log} <= {"seed", "dealer", "beaver_open", "trunc_open", "labels", "reveal"}


def test_mo_session_empty_inputs():
    mo = hospital(0, 0)
    mat, labels = mo_session(mo, session(2, MessageBus()), [], DEFAULT_CODEC)
    assert mat.rows.shape == (0, 2) and labels.shape == (0,)


def test_mo_session_requires_verified_model():
    mo, do = hospital(0, 0, verified=False), hospital(1, 3)
    s = session(2, MessageBus())
    x = do_session(do, mo, s, do.validation, DEFAULT_CODEC)
    with pytest.raises(SessionAbort):
        mo_session(mo, s, [x], DEFAULT_CODEC)


def test_mo_session_rejects_foreign_shares():
    mo, do = hospital(0, 0), hospital(1, 3)
    s1, s2 = session(2, MessageBus()), session(2, MessageBus(), seed=1)
    x = do_session(do, mo, s1, do.validation, DEFAULT_CODEC)
    with pytest.raises(SessionAbort):
        mo_session(mo, s2, [x], DEFAULT_CODEC)


def test_do_session():
    hs = [hospital(i, 5) for i in range(3)]
    bus = MessageBus()
    s = session(3, bus)
    x, y = do_session(hs[2], hs[0], s, hs[2].validation, DEFAULT_CODEC)
    assert x.shares.shape == (3, 5, 3)
    assert np.array_equal(reveal(x), encode_fixed(hs[2].validation.inputs))
    sent = [m for m in bus.log if m.sender == "H2"]
    assert [m.kind for m in sent] == ["labels"] and sent[0].receiver == "H0"
    assert fingerprint(hs[2].validation.inputs) not in bus.log.digests()
    with pytest.raises(EmptyEvalSet):
        do_session(hs[1], hs[0], s, hs[1].validation.subset([]), DEFAULT_CODEC)


def test_cross_evaluate_rows_align():
    hs = [hospital(i, 3 + i) for i in range(3)]
    bus = MessageBus()
    mats, y = cross_evaluate(hs, bus, DEFAULT_CODEC, seeds=[1, 2, 3])
    assert [m.rows.shape[0] for m in mats] == [12, 12, 12]
    assert np.array_equal(y, np.concatenate([h.validation.labels for h in hs]))
    x = np.concatenate([h.validation.inputs for h in hs])
    for h, m in zip(hs, mats):
        assert np.max(np.abs(m.rows - neural.forward(h.model, x))) < 1e-3


@pytest.fixture(scope="module")
def blobs_report():
    return run_scenario(load_config(CONFIGS / "blobs2.toml"))


def test_scenario_report(blobs_report, tmp_path):
    body = blobs_report.body
    ens = body["ensemble"]
    assert ens["tuning_accuracy"] >= max(h["tuning_accuracy"] for h in body["hospitals"])
    assert body["privacy_audit"]["violations"] == 0
    assert body["bm_chain"]["replicas_identical"]
    for h in body["hospitals"]:
        assert h["chain"]["replicas_identical"]
        assert len(h["fl_rounds"]) == 5
        assert h["encrypted_vs_quantized_max_prob_gap"] < 1e-3
    out = blobs_report.write(tmp_path / "run")
    for name in ("H0", "H1", "BM"):
        assert validate_chain(load_chain(out / "chains" / f"{name}.chain")) == (True, None)
    assert json.loads((out / "report.json").read_text()) == body
    assert (out / "probabilities" / "labels.csv").exists()
    assert "wall" not in (out / "report.json").read_text()


def test_scenario_deterministic(blobs_report, tmp_path):
    again = run_scenario(load_config(CONFIGS / "blobs2.toml"))
    assert again.to_json() == blobs_report.to_json()
    a = blobs_report.write(tmp_path / "a")
    b = again.write(tmp_path / "b")
    for rel in ("report.json", "chains/H0.chain", "chains/BM.chain", "messages.csv", "probabilities/H1.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_scenario_phase_failure_is_tagged():
    cfg = load_config(CONFIGS / "blobs2.toml")
    wrong = {"input_shape": [5], "layers": [{"kind": "dense", "in_features": 5, "out_features": 3},
                                            {"kind": "softmax"}]}
    hosp = dataclasses.replace(cfg.hospitals[1], model=wrong)
    with pytest.raises(PhaseError) as err:
        run_scenario(dataclasses.replace(cfg, hospitals=[cfg.hospitals[0], hosp]))
    assert err.value.phase == "federated"
    assert "phase 'federated' failed" in str(err.value)


def test_run_dir_name():
    cfg = load_config(CONFIGS / "blobs2.toml")
    assert run_dir_name(cfg) == "blobs2-7"
