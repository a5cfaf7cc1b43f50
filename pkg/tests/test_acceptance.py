"""Acceptance criteria 1-11. Each test prints one PASS/FAIL line, which the
terminal summary repeats under "acceptance criteria"."""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from octforge import cli, synthgen
from octforge import preprocess as pp
from octforge import tensor as T
from octforge.alignment import DomainBatch, mmd_distance, total_loss
from octforge.fusion import attention_fuse
from octforge.harness import (
    ImageStore,
    ProtocolSpec,
    RunOptions,
    aggregate_crops,
    load_manifest,
    predict_image,
    run_protocol,
    run_repeats,
    split_dataset,
)
from octforge.layers import BatchNorm2d, Conv2d
from octforge.model import Detector, ModelConfig
from octforge.octnet import BackboneConfig, OctConv, OctResNet, OctTensor
from octforge.synthgen import ManifestRecord
from octforge.tensor import Tensor
from octforge.trainer import PlateauState, TrainConfig

from .conftest import ACCEPTANCE_LINES
from .oracles import (
    avg_pool_loops,
    conv2d_loops,
    cross_entropy_scalar,
    linear_loops,
    mmd_pairs,
    oct_conv_loops,
    upsample_loops,
)
from .test_tensor import GRAD_CASES, _inputs


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. operator oracles


def test_criterion_01_operator_oracles():
    t0 = time.perf_counter()
    worst = {}

    def note(name, got, ref):
        worst[name] = max(worst.get(name, 0.0), float(np.max(np.abs(np.asarray(got, np.float64) - ref))))

    for seed in range(20):
        rng = np.random.default_rng(seed)
        f32 = lambda *s: rng.normal(size=s).astype(np.float32)  # noqa: E731
        c, o, h, w = rng.integers(1, 4), rng.integers(1, 4), rng.integers(4, 8), rng.integers(4, 8)
        k = int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
        x, wt, b = f32(c, h, w), f32(o, c, k, k), f32(o)
        note("conv2d", T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=pad).data,
             conv2d_loops(x, wt, b, stride, pad))
        x = f32(c, 2 * h, 2 * w)
        note("avg_pool2x2", T.avg_pool2x2(Tensor(x)).data, avg_pool_loops(x))
        x = f32(c, h, w)
        note("upsample_nearest2x", T.upsample_nearest2x(Tensor(x)).data, upsample_loops(x))
        layer = OctConv(rng, 4, 6, 3, 0.5, 0.5)
        xh, xl = f32(2, 6, 6), f32(2, 3, 3)
        y = layer(OctTensor(Tensor(xh), Tensor(xl), 0.5))
        rh, rl = oct_conv_loops(xh, xl, layer.w_hh.data, layer.w_lh.data, layer.w_ll.data, layer.w_hl.data, 1)
        note("oct_conv", y.high.data, rh)
        note("oct_conv", y.low.data, rl)
        x, wt, b = f32(3, 5), f32(4, 5), f32(4)
        note("linear", T.linear(Tensor(x), Tensor(wt), Tensor(b)).data, linear_loops(x, wt, b))
        z = f32(6, 2) * 3
        labels = rng.integers(0, 2, size=6)
        note("softmax_cross_entropy", T.softmax_cross_entropy(Tensor(z), labels).item(),
             cross_entropy_scalar(z, labels))

    hand = OctConv(np.random.default_rng(0), 2, 2, 1, 0.5, 0.5)
    for wt in (hand.w_hh, hand.w_lh, hand.w_ll, hand.w_hl):
        wt.data[...] = 1.0
    y = hand(OctTensor(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor([[[10.0]]]), 0.5))
    hand_ok = y.high.data[0].tolist() == [[11, 12], [13, 14]] and y.low.data[0].tolist() == [[12.5]]
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and hand_ok and elapsed < 60 and len(worst) == 6
    record(1, ok, f"6 operators x 20 seeds, max abs err {max(worst.values()):.2e}; hand case "
                  f"{'exact' if hand_ok else 'WRONG'}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient suite


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    errs = {}
    with T.float64_mode():
        for name, (shapes, fn) in sorted(GRAD_CASES.items()):
            errs[name] = T.grad_check(fn, _inputs(np.random.default_rng(len(name)), *shapes))
        rng = np.random.default_rng(1)
        for training in (True, False):
            x, g, b = _inputs(rng, (3, 2, 3, 3), (2,), (2,))
            rv = np.full(2, 1.5)

            def bn(x, g, b):
                y = T.batch_norm(x, g, b, np.zeros(2), rv.copy(), training)
                return T.tsum(T.mul(y, y)) + T.tsum(y)

            errs[f"batch_norm(train={training})"] = T.grad_check(bn, [x, g, b])
        layer = OctConv(rng, 4, 6, 3, 0.5, 0.5, stride=2)
        xh, xl = _inputs(rng, (1, 2, 8, 8), (1, 2, 4, 4))

        def oc(xh, xl, *ws):
            y = layer(OctTensor(xh, xl, 0.5))
            return T.tsum(T.mul(y.high, y.high)) + T.tsum(T.mul(y.low, y.low))

        errs["oct_conv"] = T.grad_check(oc, [xh, xl, layer.w_hh, layer.w_lh, layer.w_ll, layer.w_hl])
        a, bb, q = _inputs(rng, (3, 4), (3, 4), (4,))
        errs["attention_fuse"] = T.grad_check(
            lambda a, bb, q: T.tsum(T.mul(attention_fuse(a, bb, q)[0], attention_fuse(a, bb, q)[0])), [a, bb, q])
        fa, fb = _inputs(rng, (3, 4), (2, 4))
        errs["mmd"] = T.grad_check(
            lambda fa, fb: mmd_distance([DomainBatch(0, fa, np.zeros(3)), DomainBatch(1, fb, np.zeros(2))]),
            [fa, fb])

        # full composite: two backbones -> fuse -> classify -> CE + lambda * MMD
        model = Detector(ModelConfig("desk-10", 0.25, seed=0)).train()
        for p in model.parameters():
            assert p.data.dtype == np.float64
        cdi = Tensor(rng.uniform(-1, 1, (4, 3, 32, 32)), requires_grad=True)
        si = Tensor(rng.uniform(0, 1, (4, 1, 32, 32)), requires_grad=True)
        labels = np.array([0, 1, 0, 1])

        def composite(cdi, si, *params):
            out = model(cdi, si)
            ce = T.softmax_cross_entropy(out.logits, labels)
            pen = out.penultimate
            cda = mmd_distance([DomainBatch(0, pen[0:2], labels[:2]), DomainBatch(1, pen[2:4], labels[2:])])
            return total_loss(ce, cda, 0.5).total

        errs["composite"] = T.grad_check(composite, [cdi, si, *model.parameters()], max_elements=3, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 300
    record(2, ok, f"{len(errs)} checks incl. desk-10 composite on 32x32 ({errs['composite']:.1e}); "
                  f"max rel err {errs[worst]:.1e} ({worst}); {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. alpha = 0 degeneracy


class PlainBlock:
    """Basic residual block of ordinary convolutions; stride-2 blocks
    average-pool before their convolutions, as the octave layers do."""

    def __init__(self, rng, c_in, c_out, stride):
        self.stride = stride
        self.conv1, self.bn1 = Conv2d(rng, c_in, c_out, 3), BatchNorm2d(c_out)
        self.conv2, self.bn2 = Conv2d(rng, c_out, c_out, 3), BatchNorm2d(c_out)
        self.proj = self.proj_bn = None
        if stride != 1 or c_in != c_out:
            self.proj, self.proj_bn = Conv2d(rng, c_in, c_out, 1), BatchNorm2d(c_out)

    def __call__(self, x):
        xin = T.avg_pool2x2(x) if self.stride == 2 else x
        y = T.relu(self.bn1(self.conv1(xin)))
        y = self.bn2(self.conv2(y))
        short = self.proj_bn(self.proj(xin)) if self.proj is not None else x
        return T.relu(y + short)


class PlainDesk10:
    def __init__(self, rng, c_in):
        self.stem, self.stem_bn = Conv2d(rng, c_in, 16, 3, stride=2), BatchNorm2d(16)
        widths = (16, 32, 64, 128)
        self.blocks = [PlainBlock(rng, 16 if i == 0 else widths[i - 1], w, 1 if i == 0 else 2)
                       for i, w in enumerate(widths)]

    def modules(self):
        yield self.stem_bn
        for b in self.blocks:
            yield from (m for m in (b.bn1, b.bn2, b.proj_bn) if m is not None)

    def __call__(self, x):
        y = T.relu(self.stem_bn(self.stem(x)))
        for b in self.blocks:
            y = b(y)
        return T.global_avg_pool(y)


def transplant(oct_net, plain, rng):
    """Copy the H->H weights of an alpha = 0 octave network into the plain
    one, after randomizing the octave network's norm parameters."""
    def bn(src, dst):
        for name in ("gamma", "beta"):
            getattr(src, name).data[...] = rng.uniform(0.5, 1.5, getattr(src, name).shape)
        src.running_mean[...] = rng.normal(0, 0.1, src.running_mean.shape)
        src.running_var[...] = rng.uniform(0.5, 2.0, src.running_var.shape)
        dst.gamma.data[...], dst.beta.data[...] = src.gamma.data, src.beta.data
        dst.running_mean[...], dst.running_var[...] = src.running_mean, src.running_var

    plain.stem.w.data[...] = oct_net.stem.w.data
    bn(oct_net.stem_bn, plain.stem_bn)
    for ob, pb in zip(oct_net.blocks, plain.blocks):
        for conv in ("conv1", "conv2", "proj"):
            oc = getattr(ob, conv)
            if oc is None:
                assert getattr(pb, conv) is None
                continue
            assert oc.w_lh is None and oc.w_ll is None and oc.w_hl is None
            getattr(pb, conv).w.data[...] = oc.w_hh.data
        for norm in ("bn1", "bn2", "proj_bn"):
            on = getattr(ob, norm)
            if on is not None:
                assert on.bn_l is None
                bn(on.bn_h, getattr(pb, norm))


def test_criterion_03_alpha_zero_degeneracy():
    rng = np.random.default_rng(0)
    diffs = []
    for c_in in (3, 1):
        oct_net = OctResNet(BackboneConfig("desk-10", 0.0, c_in), np.random.default_rng(c_in))
        plain = PlainDesk10(np.random.default_rng(99), c_in)
        transplant(oct_net, plain, rng)
        x = Tensor(rng.normal(size=(2, c_in, 128, 128)).astype(np.float32))
        oct_net.eval()
        for m in plain.modules():
            m.training = False
        diffs.append(float(np.abs(oct_net(x).data - plain(x).data).max()))
        # batch statistics as well (running buffers are updated identically)
        oct_net.train()
        for m in plain.modules():
            m.training = True
        diffs.append(float(np.abs(oct_net(x).data - plain(x).data).max()))
    record(3, max(diffs) < 1e-6, f"alpha=0 desk-10 vs transplanted plain net (CDI and SI, eval and train "
                                 f"mode), max abs diff {max(diffs):.2e}")


# ---------------------------------------------------------------------------
# 4. MMD


def test_criterion_04_mmd():
    def mmd(arrays):
        with T.float64_mode():
            return mmd_distance([DomainBatch(i, Tensor(np.asarray(a, np.float64)), np.zeros(len(a)))
                                 for i, a in enumerate(arrays)]).item()

    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 6))
    same = mmd([x, x.copy(), x[::-1].copy()])
    k2 = mmd([[[0.0, 0.0]], [[1.0, 1.0]]])
    k3 = mmd([[[0.0]], [[1.0]], [[2.0]]])
    inv_ok, oracle_err = True, 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        arrays = [r.normal(size=(int(r.integers(1, 6)), 4)) for _ in range(int(r.integers(2, 5)))]
        base = mmd(arrays)
        oracle_err = max(oracle_err, abs(base - mmd_pairs(arrays)))
        shift = r.normal(size=4)
        variants = [
            [a + shift for a in arrays],
            arrays[::-1],
            [r.permutation(a) for a in arrays],
            [np.concatenate([a, a]) for a in arrays],
        ]
        inv_ok &= all(abs(mmd(v) - base) <= 1e-12 * max(1.0, base) for v in variants)
    ok = same < 1e-12 and abs(k2 - 2.0) <= 1e-9 and abs(k3 - 2.0) <= 1e-9 and inv_ok and oracle_err < 1e-12
    record(4, ok, f"identical {same:.1e}; K=2 {k2!r}; K=3 {k3!r}; invariances "
                  f"{'hold' if inv_ok else 'BROKEN'} over 50 cases; oracle gap {oracle_err:.1e}")


# ---------------------------------------------------------------------------
# 5. fusion


def test_criterion_05_fusion():
    rng = np.random.default_rng(0)
    a, b, q = rng.normal(size=(10_000, 8)), rng.normal(size=(10_000, 8)), rng.normal(size=8)
    with T.float64_mode():
        _, w = attention_fuse(Tensor(a), Tensor(b), Tensor(q))
        _, ws = attention_fuse(Tensor(b), Tensor(a), Tensor(q))
        _, w0 = attention_fuse(Tensor(a), Tensor(b), Tensor(np.zeros(8)))
    norm = float(np.abs(w.data.sum(axis=1) - 1).max())
    uniform = bool((w0.data == 0.5).all())
    swap = bool((ws.data[:, ::-1] == w.data).all())
    record(5, norm < 1e-6 and uniform and swap,
           f"10^4 inputs: max |sum-1| {norm:.1e}; q=0 gives exactly 0.5 {uniform}; swap exact {swap}")


# ---------------------------------------------------------------------------
# 6. intrinsic clues


NYQUIST_SPOTS = [(0, 64), (64, 0), (0, 0)]   # centred indices of the half-band replica peaks


def test_criterion_06_intrinsic_clues(corpus200):
    t0 = time.perf_counter()
    real_hf = np.array([pp.cdi_hf(im) for im in corpus200["camera"]])
    acc_a, means = {}, {}
    for fam in synthgen.FAMILIES:
        fake_hf = np.array([pp.cdi_hf(im) for im in corpus200[fam]])
        values = np.concatenate([real_hf, fake_hf])
        truth = np.r_[np.zeros(len(real_hf)), np.ones(len(fake_hf))]
        acc_a[fam] = max(np.mean((values > t) == truth) for t in np.unique(values))
        means[fam] = fake_hf.mean()
    part_a = all(means[f] > real_hf.mean() and acc_a[f] >= 0.8 for f in synthgen.FAMILIES)

    real_si = pp.average_spectrum(corpus200["camera"])[0]
    near_si = pp.average_spectrum(corpus200["nearest"])[0]
    near_ratio = [pp.spectral_peak_ratio(near_si, r, c) for r, c in NYQUIST_SPOTS]
    real_ratio = [pp.spectral_peak_ratio(real_si, r, c) for r, c in NYQUIST_SPOTS]
    part_b = min(near_ratio) >= 2.0 and max(real_ratio) < 2.0
    elapsed = time.perf_counter() - t0
    record(6, part_a and part_b and elapsed < 120,
           f"(a) HF(CDI) threshold acc {min(acc_a.values()):.3f} (min over families), fakes > reals "
           f"{'yes' if part_a else 'NO'}; (b) nearest SI peak/median at half-band spots "
           f"{', '.join(f'{v:.2f}' for v in near_ratio)} vs reals {max(real_ratio):.2f} "
           f"(need >= 2 and < 2); {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7. end-to-end learning


@pytest.fixture(scope="module")
def corpus600(tmp_path_factory):
    root = tmp_path_factory.mktemp("c600")
    synthgen.write_corpus(root, seed=0, count=200, families=("nearest", "bilinear"))
    return root


def test_criterion_07_end_to_end(corpus600):
    t0 = time.perf_counter()
    recs = load_manifest(corpus600 / "manifest.csv")
    spec = ProtocolSpec("seen-only", ["nearest", "bilinear"], None)
    cfg = TrainConfig(stage1_epochs=5, stage2_epochs=10, probe_epochs=5, seed=0)
    rep = run_repeats(spec, recs, ImageStore(corpus600), RunOptions(train=cfg, lam="auto"), repeats=5)
    elapsed = time.perf_counter() - t0
    accs = [r["seen_acc"] for r in rep["runs"]]
    epochs = max(r["epochs"]["stage1"] + r["epochs"]["stage2"] for r in rep["runs"])
    ok = len(recs) == 600 and rep["seen_acc"] >= 90.0 and epochs <= 30 and elapsed < 1800
    record(7, ok, f"600 images, 5 seeds: mean seen acc {rep['seen_acc']:.2f}% "
                  f"(per seed {', '.join(f'{a:.1f}' for a in accs)}); lambdas "
                  f"{[r['lambda'] for r in rep['runs']]}; {epochs} epochs max; {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 8. alignment efficacy


def test_criterion_08_alignment(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    reports = {}
    for lam in ("1", "0"):
        out = tmp_path / f"lambda{lam}.json"
        code = cli.main(["protocol", "--spec", "n1-synth", "--corpus", str(corpus), "--count", "100",
                         "--seed", "0", "--stage1-epochs", "5", "--stage2-epochs", "10", "--lambda", lam,
                         "--out", str(out)])
        capsys.readouterr()
        assert code == 0
        reports[lam] = json.loads(out.read_text())
    m1, m0 = reports["1"]["final_train_mmd"], reports["0"]["final_train_mmd"]
    ok = reports["1"]["lambda"] == 1.0 and reports["0"]["lambda"] == 0.0 and m1 < 0.5 * m0
    record(8, ok, f"n1-synth paired runs: final training MMD {m1:.4f} (lambda 1) vs {m0:.4f} (lambda 0), "
                  f"ratio {m1 / m0:.3f} (need < 0.5)")


# ---------------------------------------------------------------------------
# 9. protocol plumbing


def test_criterion_09_protocol_plumbing(tmp_path):
    synthgen.write_corpus(tmp_path, seed=4, count=10)
    recs = load_manifest(tmp_path / "manifest.csv")
    store = ImageStore(tmp_path)
    spec = ProtocolSpec("n1-synth", ["nearest", "bilinear"], "checkerboard")
    run_protocol(spec, recs, store, RunOptions(train=TrainConfig(stage1_epochs=1, stage2_epochs=1), lam=0.1))
    held_out_train_reads = sum(1 for ph, d, _ in store.reads if ph == "train" and d == "checkerboard")
    held_out_eval_reads = sum(1 for ph, d, _ in store.reads if ph == "eval" and d == "checkerboard")
    audit = held_out_train_reads == 0 and held_out_eval_reads > 0

    def stub(verdicts):
        return lambda cdi, si: (np.array([[1.0, 0.0] if v == "real" else [0.0, 1.0] for v in verdicts]),
                                np.full((len(verdicts), 2), 0.5))

    img = np.random.default_rng(0).integers(0, 256, (256, 256, 3), dtype=np.uint8)
    rule = (predict_image(img, stub(["real"] * 4)).label == "real"
            and predict_image(img, stub(["real", "real", "fake", "real"])).label == "fake"
            and predict_image(img[:128, :128], stub(["fake"])).label == "fake"
            and all(aggregate_crops(p + [1]) == "fake" for p in ([], [0], [0, 0, 0], [1, 0])))

    cells = [ManifestRecord(f"{d}/{lab}/{i}.png", lab, d)
             for d, lab in (("camera", "real"), ("nearest", "fake"), ("bilinear", "fake")) for i in range(100)]
    sp = split_dataset(cells, seed=0)
    per_cell = {(d, lab): tuple(sum(1 for r in part if (r.domain, r.label) == (d, lab))
                                for part in (sp.train, sp.val, sp.test))
                for d, lab in {(r.domain, r.label) for r in cells}}
    split_ok = set(per_cell.values()) == {(60, 20, 20)}
    record(9, audit and rule and split_ok,
           f"held-out reads during training {held_out_train_reads} (eval {held_out_eval_reads}); "
           f"any-crop rule {'ok' if rule else 'BROKEN'}; 6:2:2 per cell {sorted(set(per_cell.values()))}")


# ---------------------------------------------------------------------------
# 10. plateau schedule


def test_criterion_10_plateau_schedule():
    checks = {}
    st = PlateauState(1e-3)
    lrs = [st.update(a) for a in [90.0, 90.0, 90.05, 90.0, 90.0]]
    checks["drop after 5 flat epochs"] = (lrs[:4] == [pytest.approx(1e-3, rel=1e-6)] * 4
                                          and lrs[4] == pytest.approx(1e-4, rel=1e-6))
    st = PlateauState(1e-3)
    lrs = [st.update(a) for a in [90.0, 90.0, 90.2, 90.2, 90.2, 90.2]]
    checks["+0.2 resets window"] = all(lr == pytest.approx(1e-3, rel=1e-6) for lr in lrs)
    st = PlateauState(1e-7)
    out = [st.update(50.0) for _ in range(5)]
    checks["stop below 1e-7"] = out[-1] is None and st.stopped
    st = PlateauState(1e-3)
    n = 0
    while st.update(70.0) is not None:
        n += 1
    checks["1e-3 run terminates after 25 flat epochs"] = n + 1 == 25
    record(10, all(checks.values()), "; ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items()))


# ---------------------------------------------------------------------------
# 11. determinism and persistence


def test_criterion_11_determinism(tmp_path, capsys, tiny_corpus):
    man = str(tiny_corpus / "manifest.csv")
    args = ["--manifest", man, "--seed", "5", "--lambda", "auto", "--stage1-epochs", "3", "--stage2-epochs", "3",
            "--probe-epochs", "1"]

    def train(out, *extra):
        code = cli.main(["train", "--out", str(out), *args, *extra])
        res = json.loads(capsys.readouterr().out)
        assert code == 0
        return res

    train(tmp_path / "a")
    train(tmp_path / "b")
    same_ckpt = (tmp_path / "a" / "model.octf").read_bytes() == (tmp_path / "b" / "model.octf").read_bytes()

    part = tmp_path / "c"
    assert train(part, "--stop-after", "1").get("interrupted")
    assert train(part, "--resume", str(part / "last.octf"), "--stop-after", "2").get("interrupted")
    train(part, "--resume", str(part / "last.octf"))

    def trace(path):
        return [line.split(",")[:8] for line in Path(path).read_text().splitlines()]

    same_trace = trace(tmp_path / "a" / "train_log.csv") == trace(part / "train_log.csv")
    resumed_ckpt = (part / "model.octf").read_bytes() == (tmp_path / "a" / "model.octf").read_bytes()
    n_steps = len(trace(part / "train_log.csv")) - 1
    record(11, same_ckpt and same_trace and resumed_ckpt,
           f"two seeded runs byte-identical: {same_ckpt}; stage-1 and stage-2 interrupted runs resumed to the "
           f"same {n_steps}-step loss trace: {same_trace} and checkpoint: {resumed_ckpt}")
