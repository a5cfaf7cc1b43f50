import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octforge import synthgen
from octforge.harness import (
    PROTOCOLS,
    DataError,
    ImageStore,
    ProtocolSpec,
    RunOptions,
    aggregate_crops,
    compute_metrics,
    domain_assignment,
    load_manifest,
    mean_reports,
    predict_image,
    resolve_protocol,
    run_protocol,
    split_dataset,
)
from octforge.synthgen import ManifestRecord
from octforge.trainer import TrainConfig


def write_manifest(tmp_path, rows, header="path,label,domain", touch=True):
    for r in rows:
        if touch:
            (tmp_path / r[0]).parent.mkdir(parents=True, exist_ok=True)
            (tmp_path / r[0]).write_bytes(b"")
    path = tmp_path / "m.csv"
    path.write_text("\n".join([header] + [",".join(r) for r in rows]) + "\n")
    return path


# ---------------------------------------------------------------------------
# manifest


def test_manifest_three_rows(tmp_path):
    rows = [("a.png", "real", "camera"), ("b.png", "Fake", "nearest"), ("c.png", "FAKE", "bilinear")]
    recs = load_manifest(write_manifest(tmp_path, rows))
    assert [(r.path, r.label, r.domain) for r in recs] == [
        ("a.png", "real", "camera"), ("b.png", "fake", "nearest"), ("c.png", "fake", "bilinear")]


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="maybe"):
        load_manifest(write_manifest(tmp_path, [("a.png", "maybe", "camera")]))
    with pytest.raises(DataError, match="dup.png"):
        load_manifest(write_manifest(tmp_path, [("dup.png", "real", "camera"), ("dup.png", "fake", "x")]))
    with pytest.raises(DataError, match="header"):
        load_manifest(write_manifest(tmp_path, [("a.png", "real", "camera")], header="file,label,domain"))
    with pytest.raises(DataError, match="missing"):
        load_manifest(write_manifest(tmp_path, [("nothere.png", "real", "camera")], touch=False))
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "absent.csv")


# ---------------------------------------------------------------------------
# splits


def records(cells):
    out = []
    for (domain, label), n in cells.items():
        out += [ManifestRecord(f"{domain}/{label}/{i}.png", label, domain) for i in range(n)]
    return out


def test_split_exact_per_cell():
    recs = records({("camera", "real"): 100, ("nearest", "fake"): 100, ("bilinear", "fake"): 100})
    sp = split_dataset(recs, seed=0)
    for part, n in ((sp.train, 60), (sp.val, 20), (sp.test, 20)):
        counts = Counter((r.domain, r.label) for r in part)
        assert set(counts.values()) == {n}
    assert len({r.path for r in sp.train + sp.val + sp.test}) == 300


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 60), st.integers(10, 60), st.integers(0, 1000))
def test_split_stratified_and_deterministic(n_real, n_fake, seed):
    recs = records({("d", "real"): n_real, ("d", "fake"): n_fake})
    a, b = split_dataset(recs, seed), split_dataset(recs, seed)
    assert a == b
    for part, frac in ((a.train, 0.6), (a.val, 0.2)):
        c = Counter(r.label for r in part)
        assert abs(c["real"] - frac * n_real) <= 1 and abs(c["fake"] - frac * n_fake) <= 1


def test_split_seed_changes_assignment_and_small_cell_errors():
    recs = records({("d", "real"): 50, ("d", "fake"): 50})
    assert split_dataset(recs, 0).train != split_dataset(recs, 1).train
    with pytest.raises(DataError, match="at least 10"):
        split_dataset(records({("d", "real"): 9, ("d", "fake"): 50}), 0)


# ---------------------------------------------------------------------------
# any-crop rule


def stub(verdicts):
    """Classifier that answers the given per-crop labels in order."""

    def run(cdi, si):
        assert len(cdi) == len(verdicts) and cdi.shape[1:] == (3, 128, 128) and si.shape[1:] == (1, 128, 128)
        logits = np.array([[1.0, 0.0] if v == "real" else [0.0, 1.0] for v in verdicts])
        return logits, np.full((len(verdicts), 2), 0.5)

    return run


def image(h, w):
    return np.random.default_rng(0).integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_any_crop_rule_stubbed():
    assert predict_image(image(256, 256), stub(["real"] * 4)).label == "real"
    v = predict_image(image(256, 256), stub(["real", "real", "fake", "real"]))
    assert v.label == "fake" and v.crop_labels == ["real", "real", "fake", "real"]
    assert v.weights == (0.5, 0.5)
    for single in ("real", "fake"):
        assert predict_image(image(128, 128), stub([single])).label == single
    with pytest.raises(ValueError):
        predict_image(image(100, 128), stub(["real"]))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=9), st.integers(0, 9))
def test_any_crop_rule_monotone(preds, pos):
    before = aggregate_crops(preds)
    after = aggregate_crops(preds[:pos] + [1] + preds[pos:])
    assert after == "fake"
    assert before == ("fake" if 1 in preds else "real")


# ---------------------------------------------------------------------------
# metrics


def test_compute_metrics_cases():
    m = compute_metrics(["fake", "real"], ["fake", "real"])
    assert m.accuracy == 100.0
    m = compute_metrics(["fake", "fake", "real", "real"], ["fake", "real", "real", "real"], ["a", "a", "b", "b"])
    assert m.accuracy == 75.0
    assert m.per_domain == {"a": 50.0, "b": 100.0}
    assert m.confusion["true_real"] == {"pred_real": 2, "pred_fake": 1}
    assert sum(sum(r.values()) for r in m.confusion.values()) == m.n == 4
    with pytest.raises(ValueError, match="length"):
        compute_metrics(["fake"], ["fake", "real"])


def test_mean_reports():
    base = dict(protocol="p", unseen_acc=None, seen_crop_acc=90.0, unseen_crop_acc=None,
                final_train_mmd=0.1, mean_fusion_weights={"cdi": 0.4, "si": 0.6})
    reps = [dict(base, seed=s, seen_acc=acc, per_domain={"x": acc}, **{"lambda": lam})
            for s, acc, lam in [(0, 90.0, 0.1), (1, 100.0, 0.3)]]
    out = mean_reports(reps)
    assert out["seen_acc"] == 95.0 and out["lambda"] == pytest.approx(0.2)
    assert out["per_domain"] == {"x": 95.0} and out["unseen_acc"] is None
    assert out["seeds"] == [0, 1] and len(out["runs"]) == 2


# ---------------------------------------------------------------------------
# protocol specs


def test_protocol_spec_validation(tmp_path):
    with pytest.raises(DataError):
        ProtocolSpec("x", ["a"], "b")
    with pytest.raises(DataError):
        ProtocolSpec("x", ["a", "b"], "a")
    with pytest.raises(DataError):
        ProtocolSpec("x", ["a", "a"], "b")
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"name": "mine", "train_domains": ["a", "b"], "test_domain": "c"}))
    assert resolve_protocol(str(p)).train_domains == ["a", "b"]
    p.write_text(json.dumps({"name": "mine", "train_domains": ["a", "b"], "test_domain": "c", "extra": 1}))
    with pytest.raises(DataError, match="extra"):
        resolve_protocol(str(p))
    with pytest.raises(DataError):
        resolve_protocol("n9-synth")
    n1 = PROTOCOLS["n1-synth"]
    assert (n1.train_domains, n1.test_domain) == (["nearest", "bilinear"], "checkerboard")


def test_domain_assignment_spreads_reals():
    spec = PROTOCOLS["n1-synth"]
    recs = [ManifestRecord(f"{i}", "real", "camera") for i in range(4)]
    recs += [ManifestRecord("n", "fake", "nearest"), ManifestRecord("b", "fake", "bilinear")]
    assert domain_assignment(recs, spec) == [0, 1, 0, 1, 0, 1]


# ---------------------------------------------------------------------------
# protocol run with access audit


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("proto")
    synthgen.write_corpus(root, seed=1, count=10)
    return root


def test_protocol_isolation_and_report(small_corpus):
    recs = load_manifest(small_corpus / "manifest.csv")
    store = ImageStore(small_corpus)
    opts = RunOptions(train=TrainConfig(stage1_epochs=1, stage2_epochs=1, seed=0), lam=1.0)
    rep = run_protocol(PROTOCOLS["n1-synth"], recs, store, opts)

    assert store.domains_read("train") == {"camera", "nearest", "bilinear"}
    assert "checkerboard" not in store.domains_read("train")
    assert "checkerboard" in store.domains_read("eval")
    # training touches only train and val records; evaluation only test records
    sp = split_dataset(recs, 0)
    fit = {r.path for r in sp.train + sp.val}
    assert {p for ph, _, p in store.reads if ph == "train"} <= fit
    assert {p for ph, _, p in store.reads if ph == "eval"} <= {r.path for r in sp.test}

    for key in ("seen_acc", "unseen_acc", "seen_crop_acc", "unseen_crop_acc"):
        assert 0.0 <= rep[key] <= 100.0
    assert rep["lambda"] == 1.0 and rep["protocol"] == "n1-synth"
    assert set(rep["per_domain"]) == {"camera", "nearest", "bilinear", "checkerboard"}
    w = rep["mean_fusion_weights"]
    assert w["cdi"] + w["si"] == pytest.approx(1.0)
    assert rep["final_train_mmd"] >= 0
    json.dumps(rep)


def test_protocol_missing_domain(tiny_corpus):
    recs = load_manifest(tiny_corpus / "manifest.csv")
    with pytest.raises(DataError, match="checkerboard"):
        run_protocol(PROTOCOLS["n1-synth"], recs, ImageStore(tiny_corpus), RunOptions())
