"""Manifest ingestion, stratified splits, per-image inference, metrics and
the cross-manipulation protocol runner."""
from __future__ import annotations

import csv
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import preprocess as pp
from .model import Detector, ModelConfig
from .synthgen import REAL_DOMAIN, ManifestRecord
from .tensor import Tensor, no_grad
from .trainer import (
    SampleSet,
    TrainConfig,
    TrainLog,
    build_prefix_cache,
    select_lambda,
    train_stage1,
    train_stage2,
)

log = logging.getLogger(__name__)

LABELS = {"real": 0, "fake": 1}
LABEL_NAMES = ("real", "fake")
SPLIT_RATIO = (6, 2, 2)
MIN_CELL = 10


class DataError(ValueError):
    """Malformed manifest, image or protocol input."""


# ---------------------------------------------------------------------------
# manifest and splits


def load_manifest(path) -> list[ManifestRecord]:
    """Read ``path,label,domain`` rows; paths are resolved against the
    manifest's directory and must exist."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "domain"]:
            raise DataError(f"{path}: header must be 'path,label,domain', got {header}")
        records, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rel, label, domain = (x.strip() for x in row)
            label = label.lower()
            if label not in LABELS:
                raise DataError(f"{path}:{lineno}: unknown label {row[1]!r} (expected real or fake)")
            if not domain:
                raise DataError(f"{path}:{lineno}: empty domain")
            if rel in seen:
                raise DataError(f"{path}:{lineno}: duplicate path {rel!r}")
            seen.add(rel)
            if not (path.parent / rel).is_file():
                raise DataError(f"{path}:{lineno}: image file missing: {rel}")
            records.append(ManifestRecord(rel, label, domain))
    return records


@dataclass
class Split:
    train: list[ManifestRecord]
    val: list[ManifestRecord]
    test: list[ManifestRecord]


def _cell_rng(seed: int, domain: str, label: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(domain.encode()), LABELS[label]])


def split_counts(n: int, ratio=SPLIT_RATIO) -> tuple[int, int, int]:
    total = sum(ratio)
    n_train = int(round(n * ratio[0] / total))
    n_val = int(round(n * ratio[1] / total))
    return n_train, n_val, n - n_train - n_val


def split_dataset(records: Sequence[ManifestRecord], seed: int, ratio=SPLIT_RATIO) -> Split:
    """Stratified split by (domain, label). Each cell is shuffled with its own
    seeded generator, so a cell's split does not depend on the others."""
    cells: dict[tuple[str, str], list[int]] = {}
    for i, r in enumerate(records):
        cells.setdefault((r.domain, r.label), []).append(i)
    parts: list[list[int]] = [[], [], []]
    for (domain, label), idx in sorted(cells.items()):
        if len(idx) < MIN_CELL:
            raise DataError(f"cell ({domain}, {label}) has {len(idx)} records; need at least {MIN_CELL}")
        perm = _cell_rng(seed, domain, label).permutation(len(idx))
        a, b, _ = split_counts(len(idx), ratio)
        for k, sl in enumerate((perm[:a], perm[a : a + b], perm[a + b :])):
            parts[k].extend(idx[j] for j in sl)
    return Split(*[[records[i] for i in sorted(p)] for p in parts])


# ---------------------------------------------------------------------------
# image access


class ImageStore:
    """Reads images under ``root`` and records every read as
    (phase, domain, path), so tests can audit what each phase touched."""

    def __init__(self, root, threads: int = 1):
        self.root = Path(root)
        self.threads = max(1, int(threads))
        self.phase = "idle"
        self.reads: list[tuple[str, str, str]] = []

    def load(self, rec: ManifestRecord) -> np.ndarray:
        self.reads.append((self.phase, rec.domain, rec.path))
        try:
            return pp.load_rgb(self.root / rec.path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {rec.path}: {exc}") from None

    def domains_read(self, phase: str) -> set[str]:
        return {d for p, d, _ in self.reads if p == phase}


def image_inputs(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CDI [n,3,128,128] and SI [n,1,128,128] for every crop of ``img``."""
    _, crops = pp.crop_parts(img)
    return np.stack([pp.compute_cdi(c) for c in crops]), np.stack([pp.compute_si(c) for c in crops])


def build_samples(records: Sequence[ManifestRecord], store: ImageStore, domain_ids: dict[str, int]) -> SampleSet:
    """Crop-level samples; ``ids`` holds the index of the source record."""

    def one(rec):
        return image_inputs(store.load(rec))

    if store.threads > 1:
        with ThreadPoolExecutor(store.threads) as ex:
            inputs = list(ex.map(one, records))
    else:
        inputs = [one(r) for r in records]
    cdi, si, labels, domains, ids = [], [], [], [], []
    for k, (rec, (c, s)) in enumerate(zip(records, inputs)):
        cdi.append(c)
        si.append(s)
        labels += [LABELS[rec.label]] * len(c)
        domains += [domain_ids[rec.domain]] * len(c)
        ids += [k] * len(c)
    if not records:
        empty = np.zeros((0, 3, pp.CROP, pp.CROP), np.float32)
        return SampleSet(empty, empty[:, :1], np.zeros(0, np.int64), np.zeros(0, np.int64), [])
    return SampleSet(np.concatenate(cdi), np.concatenate(si), np.array(labels, np.int64),
                     np.array(domains, np.int64), ids)


# ---------------------------------------------------------------------------
# inference


Classifier = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def model_classifier(model: Detector, batch: int = 20) -> Classifier:
    """Wrap a detector as (cdi, si) -> (logits [n,2], fusion weights [n,2])."""

    def run(cdi: np.ndarray, si: np.ndarray):
        model.eval()
        logits, weights = [], []
        with no_grad():
            for i in range(0, len(cdi), batch):
                out = model(Tensor(cdi[i : i + batch]), Tensor(si[i : i + batch]))
                logits.append(out.logits.data)
                weights.append(out.weights.data)
        return np.concatenate(logits), np.concatenate(weights)

    return run


@dataclass
class ImageVerdict:
    label: str
    crop_labels: list[str]
    weights: tuple[float, float]     # mean (cdi, si) over crops


def aggregate_crops(crop_pred: Sequence[int]) -> str:
    """Any-crop-fake rule."""
    return "fake" if any(int(p) == LABELS["fake"] for p in crop_pred) else "real"


def predict_image(img: np.ndarray, classifier: Classifier) -> ImageVerdict:
    cdi, si = image_inputs(img)
    logits, weights = classifier(cdi, si)
    pred = np.argmax(logits, axis=1)
    w = np.asarray(weights, dtype=np.float64).mean(axis=0)
    return ImageVerdict(aggregate_crops(pred), [LABEL_NAMES[p] for p in pred], (float(w[0]), float(w[1])))


def predict_samples(samples: SampleSet, n_images: int, classifier: Classifier):
    """Per-crop predictions and per-image verdicts for a built SampleSet."""
    logits, weights = classifier(samples.cdi, samples.si)
    crop_pred = np.argmax(logits, axis=1)
    ids = np.asarray(samples.ids)
    verdicts = []
    for k in range(n_images):
        sel = ids == k
        w = weights[sel].mean(axis=0)
        verdicts.append(ImageVerdict(aggregate_crops(crop_pred[sel]), [LABEL_NAMES[p] for p in crop_pred[sel]],
                                     (float(w[0]), float(w[1]))))
    return crop_pred, verdicts


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    n: int
    confusion: dict            # {"true_real": {"pred_real": n, "pred_fake": n}, ...}
    per_domain: dict = field(default_factory=dict)
    crop_accuracy: float | None = None


def _as_label(x) -> str:
    if isinstance(x, str):
        x = x.lower()
        if x not in LABELS:
            raise ValueError(f"unknown label {x!r}")
        return x
    return LABEL_NAMES[int(x)]


def compute_metrics(verdicts: Sequence, truths: Sequence, domains: Sequence[str] | None = None) -> Metrics:
    if len(verdicts) != len(truths):
        raise ValueError(f"length mismatch: {len(verdicts)} verdicts vs {len(truths)} truths")
    if domains is not None and len(domains) != len(truths):
        raise ValueError("domains must align with truths")
    if len(truths) == 0:
        raise ValueError("no samples to score")
    pv = [_as_label(v) for v in verdicts]
    tv = [_as_label(t) for t in truths]
    conf = {f"true_{t}": {f"pred_{p}": 0 for p in LABEL_NAMES} for t in LABEL_NAMES}
    for p, t in zip(pv, tv):
        conf[f"true_{t}"][f"pred_{p}"] += 1
    correct = [p == t for p, t in zip(pv, tv)]
    per_domain = {}
    if domains is not None:
        for d in sorted(set(domains)):
            sel = [c for c, dd in zip(correct, domains) if dd == d]
            per_domain[d] = 100.0 * sum(sel) / len(sel)
    return Metrics(100.0 * sum(correct) / len(correct), len(correct), conf, per_domain)


def mean_reports(reports: Sequence[dict]) -> dict:
    """Average the numeric fields of per-seed reports."""
    if not reports:
        raise ValueError("no reports to average")
    out = {"protocol": reports[0]["protocol"], "seeds": [r["seed"] for r in reports]}
    for key in ("lambda", "seen_acc", "unseen_acc", "seen_crop_acc", "unseen_crop_acc", "final_train_mmd"):
        vals = [r[key] for r in reports if r.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    domains = sorted({d for r in reports for d in r["per_domain"]})
    out["per_domain"] = {d: float(np.mean([r["per_domain"][d] for r in reports if d in r["per_domain"]]))
                         for d in domains}
    out["mean_fusion_weights"] = {
        k: float(np.mean([r["mean_fusion_weights"][k] for r in reports])) for k in ("cdi", "si")
    }
    out["runs"] = list(reports)
    return out


# ---------------------------------------------------------------------------
# protocols


@dataclass
class ProtocolSpec:
    name: str
    train_domains: list
    test_domain: str | None
    real_domain: str = REAL_DOMAIN
    ratio: tuple = SPLIT_RATIO

    def __post_init__(self):
        self.train_domains = list(self.train_domains)
        self.ratio = tuple(self.ratio)
        if len(self.train_domains) < 2:
            raise DataError(f"protocol {self.name}: need at least 2 training domains")
        if len(set(self.train_domains)) != len(self.train_domains):
            raise DataError(f"protocol {self.name}: duplicate training domain")
        if self.test_domain is not None and self.test_domain in self.train_domains:
            raise DataError(f"protocol {self.name}: test domain {self.test_domain} is also a training domain")
        if self.real_domain in self.train_domains or self.real_domain == self.test_domain:
            raise DataError(f"protocol {self.name}: real domain cannot be a manipulation domain")

    @classmethod
    def from_file(cls, path) -> "ProtocolSpec":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read protocol file {path}: {exc}") from None
        unknown = set(raw) - {"name", "train_domains", "test_domain", "real_domain", "ratio"}
        if unknown:
            raise DataError(f"unknown protocol keys: {sorted(unknown)}")
        return cls(**raw)


PROTOCOLS = {
    "n1-synth": ProtocolSpec("n1-synth", ["nearest", "bilinear"], "checkerboard"),
    "n2-synth": ProtocolSpec("n2-synth", ["nearest", "checkerboard"], "bilinear"),
    "n3-synth": ProtocolSpec("n3-synth", ["bilinear", "checkerboard"], "nearest"),
}


def resolve_protocol(name_or_path: str) -> ProtocolSpec:
    if name_or_path in PROTOCOLS:
        return PROTOCOLS[name_or_path]
    if Path(name_or_path).is_file():
        return ProtocolSpec.from_file(name_or_path)
    raise DataError(f"unknown protocol {name_or_path!r}; presets: {sorted(PROTOCOLS)}")


def domain_assignment(records: Sequence[ManifestRecord], spec: ProtocolSpec) -> list[int]:
    """Alignment-domain id per training record: fakes by their manipulation,
    reals spread round-robin over the manipulation domains so every domain
    carries both labels."""
    ids, k = [], 0
    n = len(spec.train_domains)
    for r in records:
        if r.domain == spec.real_domain:
            ids.append(k % n)
            k += 1
        else:
            ids.append(spec.train_domains.index(r.domain))
    return ids


def _samples_with_domains(records, store, spec, domain_of) -> SampleSet:
    s = build_samples(records, store, {d: 0 for d in {r.domain for r in records}})
    rec_dom = np.array(domain_of, dtype=np.int64)
    s.domains = rec_dom[np.asarray(s.ids, dtype=np.int64)] if len(s) else s.domains
    return s


@dataclass
class RunOptions:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lam: float | str = "auto"
    log_path: str | None = None


def _evaluate(model: Detector, records, store, domain_ids) -> tuple[Metrics, float, list[ImageVerdict]]:
    samples = build_samples(records, store, domain_ids)
    crop_pred, verdicts = predict_samples(samples, len(records), model_classifier(model))
    truths = [r.label for r in records]
    m = compute_metrics([v.label for v in verdicts], truths, [r.domain for r in records])
    crop_acc = 100.0 * float(np.mean(crop_pred == samples.labels))
    m.crop_accuracy = crop_acc
    return m, crop_acc, verdicts


def run_protocol(spec: ProtocolSpec, records: Sequence[ManifestRecord], store: ImageStore,
                 opts: RunOptions) -> dict:
    """Stage 1, lambda selection (or a fixed lambda), stage 2 on the training
    domains; evaluation on the seen-domain test split and, when the protocol
    names one, the held-out domain's test split."""
    present = {r.domain for r in records}
    needed = set(spec.train_domains) | {spec.real_domain}
    if spec.test_domain is not None:
        needed.add(spec.test_domain)
    missing = sorted(needed - present)
    if missing:
        raise DataError(f"protocol {spec.name}: corpus lacks domains {missing}")
    seed = opts.train.seed
    used = [r for r in records if r.domain in needed]
    split = split_dataset(used, seed, spec.ratio)
    seen_domains = set(spec.train_domains) | {spec.real_domain}

    store.phase = "train"
    train_recs = [r for r in split.train if r.domain in seen_domains]
    val_recs = [r for r in split.val if r.domain in seen_domains]
    train = _samples_with_domains(train_recs, store, spec, domain_assignment(train_recs, spec))
    val = _samples_with_domains(val_recs, store, spec, domain_assignment(val_recs, spec))

    model = Detector(ModelConfig(opts.model.depth, opts.model.alpha, seed))
    tlog = TrainLog(opts.log_path)
    s1 = train_stage1(model, train, val, opts.train, tlog)
    caches = (build_prefix_cache(model, train), build_prefix_cache(model, val))
    probes = []
    if opts.lam == "auto":
        lam, probes = select_lambda(model, s1.checkpoint, train, val, opts.train, caches)
    else:
        lam = float(opts.lam)
    model.load_state_arrays(s1.checkpoint)
    s2 = train_stage2(model, train, val, opts.train, lam, tlog, caches=caches)

    store.phase = "eval"
    seen_test = [r for r in split.test if r.domain in seen_domains]
    all_ids = {d: i for i, d in enumerate(sorted(needed))}
    seen_m, seen_crop, seen_v = _evaluate(model, seen_test, store, all_ids)
    verdicts = list(seen_v)
    per_domain = dict(seen_m.per_domain)
    unseen_acc = unseen_crop = None
    if spec.test_domain is not None:
        reals = [r for r in split.test if r.domain == spec.real_domain]
        held = [r for r in split.test if r.domain == spec.test_domain]
        un_m, unseen_crop, un_v = _evaluate(model, reals + held, store, all_ids)
        unseen_acc = un_m.accuracy
        per_domain[spec.test_domain] = un_m.per_domain[spec.test_domain]
        verdicts += un_v[len(reals):]
    store.phase = "idle"
    w = np.mean([v.weights for v in verdicts], axis=0)
    return {
        "protocol": spec.name,
        "seed": seed,
        "lambda": lam,
        "seen_acc": seen_m.accuracy,
        "unseen_acc": unseen_acc,
        "seen_crop_acc": seen_crop,
        "unseen_crop_acc": unseen_crop,
        "per_domain": per_domain,
        "mean_fusion_weights": {"cdi": float(w[0]), "si": float(w[1])},
        "confusion_seen": seen_m.confusion,
        "final_train_mmd": s2.epoch_stats[-1]["train_mmd"] if s2.epoch_stats else None,
        "epochs": {"stage1": s1.run.epoch, "stage2": s2.run.epoch},
        "lambda_probes": probes,
        "stage1_best_val_acc": s1.run.best_acc,
    }


def run_repeats(spec: ProtocolSpec, records, store: ImageStore, opts: RunOptions, repeats: int = 1) -> dict:
    """``repeats`` seeded runs (seed, seed+1, ...); single runs are returned
    as is, several are averaged with the individual reports attached."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    reports = []
    for r in range(repeats):
        train_cfg = TrainConfig(**{**asdict(opts.train), "seed": opts.train.seed + r})
        o = RunOptions(opts.model, train_cfg, opts.lam, opts.log_path)
        reports.append(run_protocol(spec, records, store, o))
        log.info("run %d/%d seen=%.2f unseen=%s", r + 1, repeats, reports[-1]["seen_acc"], reports[-1]["unseen_acc"])
    return reports[0] if repeats == 1 else mean_reports(reports)
