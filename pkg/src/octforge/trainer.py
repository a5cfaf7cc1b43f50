"""Two-stage training: full cross-entropy training, then fine-tuning of the
final residual blocks and the fusion head with cross-entropy plus the
cross-domain alignment term. Adam, plateau learning-rate drops, lambda
selection and resumable checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .alignment import DomainBatch, mmd_distance, total_loss
from .model import Detector, ModelConfig
from .octnet import PRESETS, OctTensor
from .tensor import NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)
LOG_FIELDS = ["step", "epoch", "stage", "lr", "ce", "cda", "lambda", "total", "val_acc"]


def f32(x: float) -> float:
    """Round to the nearest float32 so checkpointed scalars resume exactly."""
    return float(np.float32(x))


@dataclass
class TrainConfig:
    stage1_batch: int = 10
    stage2_batch: int = 16
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    threshold: float = 0.1          # percentage points of validation accuracy
    lr_floor: float = 1e-7
    lambda_grid: tuple = LAMBDA_GRID
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    probe_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        if not self.lambda_grid:
            raise ValueError("lambda grid must not be empty")
        for name in ("stage1_batch", "stage2_batch", "lr_stage1", "lr_stage2", "beta1", "beta2",
                     "eps", "patience", "threshold", "lr_floor", "stage1_epochs", "stage2_epochs",
                     "probe_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if any(x < 0 for x in self.lambda_grid):
            raise ValueError("lambda grid values must be non-negative")


@dataclass
class SampleSet:
    """Preprocessed crops held in memory."""

    cdi: np.ndarray                  # [N, 3, H, W] float32
    si: np.ndarray                   # [N, 1, H, W] float32
    labels: np.ndarray               # [N] 0 = real, 1 = fake
    domains: np.ndarray              # [N] integer domain ids
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        ids = [self.ids[i] for i in idx] if self.ids else []
        return SampleSet(self.cdi[idx], self.si[idx], self.labels[idx], self.domains[idx], ids)


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Parameter], lr: float) -> None:
        """One bias-corrected Adam update; frozen parameters are skipped."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in params:
            if not p.trainable:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        out["meta/adam_t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state_arrays(self, arrays) -> None:
        self.t = int(arrays["meta/adam_t"][0])
        self.m = {k[len("adam.m/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam.v/")}


def adam_step(params: Sequence[Parameter], state: Adam, lr: float) -> None:
    state.step(params, lr)


@dataclass
class PlateauState:
    """Drop the learning rate 10x when validation accuracy has not risen by
    ``threshold`` points over a window of ``patience`` epochs (the window
    starts at the reference epoch); stop once the rate falls below the floor."""

    lr: float
    patience: int = 5
    threshold: float = 0.1
    floor: float = 1e-7
    best: float = -math.inf
    count: int = 0
    stopped: bool = False

    def __post_init__(self):
        self.lr = f32(self.lr)

    def update(self, acc: float) -> float | None:
        """Record one epoch; returns the learning rate to use next, or None
        to stop."""
        acc = f32(acc)
        # slack absorbs float32 rounding of stored accuracies (spacing ~8e-6 near 100)
        if self.count == 0 or acc >= self.best + self.threshold - 1e-4:
            self.best = max(acc, self.best) if self.count == 0 else acc
            self.count = 1
        else:
            self.count += 1
        if self.count >= self.patience:
            new_lr = f32(self.lr / 10.0)
            self.count = 0
            if new_lr < self.floor * (1 - 1e-4):
                self.stopped = True
                return None
            self.lr = new_lr
        return self.lr

    def as_array(self) -> np.ndarray:
        return np.array([self.lr, self.best if math.isfinite(self.best) else -1.0, self.count, self.stopped],
                        dtype=np.float32)

    @classmethod
    def from_array(cls, arr, patience, threshold, floor) -> "PlateauState":
        lr, best, count, stopped = (float(x) for x in arr)
        st = cls(lr, patience, threshold, floor)
        st.best = best if count > 0 else -math.inf
        st.count, st.stopped = int(count), bool(stopped)
        return st


def lr_plateau_update(history: Sequence[float], state: PlateauState) -> float | None:
    """Feed the newest accuracy of ``history`` into ``state``."""
    if not history:
        raise ValueError("history must not be empty")
    return state.update(history[-1])


# ---------------------------------------------------------------------------
# logging / checkpoints


class TrainLog:
    """In-memory rows, optionally mirrored to CSV."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def extend(self, rows: list[dict]) -> None:
        self.rows.extend(rows)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                w = csv.DictWriter(fh, LOG_FIELDS)
                for r in rows:
                    w.writerow({k: r.get(k, "") for k in LOG_FIELDS})


@dataclass
class RunState:
    """Everything needed to continue a stage from an epoch boundary."""

    stage: int
    epoch: int                 # epochs completed
    sched: PlateauState
    adam: Adam
    seed: int
    lam: float = 0.0
    step: int = 0
    best_acc: float = -1.0
    best_state: dict | None = None


def checkpoint_arrays(model: Detector, run: RunState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    out.update(model.state_arrays())
    out.update(run.adam.state_arrays())
    out["meta/stage"] = np.array([run.stage], dtype=np.float32)
    out["meta/epoch"] = np.array([run.epoch], dtype=np.float32)
    out["meta/step"] = np.array([run.step], dtype=np.float32)
    out["meta/lr"] = np.array([run.sched.lr], dtype=np.float32)
    out["meta/sched"] = run.sched.as_array()
    out["meta/rng_seed"] = ckpt.pack_u64(run.seed)
    out["meta/lambda"] = ckpt.pack_f64(run.lam)  # exact, so a resumed run weights the loss identically
    out["meta/best_acc"] = np.array([run.best_acc], dtype=np.float32)
    out["meta/model"] = np.array([list(PRESETS).index(model.cfg.depth), model.cfg.alpha], dtype=np.float32)
    if run.best_state is not None:
        out.update({f"best/{k}": v for k, v in run.best_state.items()})
    return out


def save_checkpoint(model: Detector, run: RunState, path) -> None:
    ckpt.save(checkpoint_arrays(model, run), path)


def model_config_from(arrays, seed: int = 0) -> ModelConfig:
    """Backbone preset and alpha recorded in a checkpoint."""
    depth_idx, alpha = arrays["meta/model"]
    return ModelConfig(list(PRESETS)[int(depth_idx)], float(alpha), seed)


def load_model(path) -> Detector:
    """Detector with the weights of a checkpoint file, in eval mode."""
    arrays = ckpt.load(path)
    model = Detector(model_config_from(arrays))
    model.load_state_arrays(arrays)
    return model.eval()


def load_checkpoint(path, model: Detector, cfg: TrainConfig) -> RunState:
    arrays = ckpt.load(path)
    model.load_state_arrays(arrays)
    adam = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    adam.load_state_arrays(arrays)
    sched = PlateauState.from_array(arrays["meta/sched"], cfg.patience, cfg.threshold, cfg.lr_floor)
    best = {k[len("best/"):]: np.array(v) for k, v in arrays.items() if k.startswith("best/")}
    return RunState(
        stage=int(arrays["meta/stage"][0]),
        epoch=int(arrays["meta/epoch"][0]),
        sched=sched,
        adam=adam,
        seed=ckpt.unpack_u64(arrays["meta/rng_seed"]),
        lam=ckpt.unpack_f64(arrays["meta/lambda"]),
        step=int(arrays["meta/step"][0]),
        best_acc=float(arrays["meta/best_acc"][0]),
        best_state=best or None,
    )


def snapshot(model: Detector) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_arrays().items()}


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_logits(model: Detector, data: SampleSet, batch: int = 20) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(data), batch):
            res = model(Tensor(data.cdi[i : i + batch]), Tensor(data.si[i : i + batch]))
            out.append(res.logits.data)
    return np.concatenate(out) if out else np.zeros((0, 2), np.float32)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("empty evaluation split")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class StageResult:
    checkpoint: dict
    run: RunState
    epoch_stats: list[dict]


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, stage, epoch])


def train_stage1(
    model: Detector,
    train: SampleSet,
    val: SampleSet,
    cfg: TrainConfig,
    train_log: TrainLog | None = None,
    resume: RunState | None = None,
    checkpoint_path=None,
    max_epochs: int | None = None,
) -> StageResult:
    """Cross-entropy training of every parameter; returns the best-validation
    state. ``max_epochs`` stops early (for interruption tests) without
    touching the schedule."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("stage 1 needs non-empty train and validation splits")
    model.set_trainable(True)
    run = resume or RunState(1, 0, PlateauState(cfg.lr_stage1, cfg.patience, cfg.threshold, cfg.lr_floor),
                             Adam(cfg.beta1, cfg.beta2, cfg.eps), cfg.seed)
    train_log = train_log or TrainLog()
    stats: list[dict] = []
    params = model.parameters()
    limit = cfg.stage1_epochs if max_epochs is None else min(cfg.stage1_epochs, max_epochs)
    while run.epoch < limit and not run.sched.stopped:
        epoch = run.epoch + 1
        perm = _epoch_rng(run.seed, 1, epoch).permutation(len(train))
        model.train()
        rows, losses = [], []
        lr = run.sched.lr
        for i in range(0, len(train), cfg.stage1_batch):
            idx = np.sort(perm[i : i + cfg.stage1_batch])
            model.zero_grad()
            out = model(Tensor(train.cdi[idx]), Tensor(train.si[idx]))
            ce = T.softmax_cross_entropy(out.logits, train.labels[idx])
            T.backward(ce)
            run.adam.step(params, lr)
            run.step += 1
            losses.append(ce.item())
            rows.append(dict(step=run.step, epoch=epoch, stage=1, lr=lr, ce=ce.item(), cda="",
                             **{"lambda": 0.0}, total=ce.item(), val_acc=""))
        acc = accuracy(predict_logits(model, val), val.labels)
        rows[-1]["val_acc"] = acc
        train_log.extend(rows)
        if acc > run.best_acc:
            run.best_acc = f32(acc)
            run.best_state = snapshot(model)
        run.sched.update(acc)
        run.epoch = epoch
        stats.append(dict(epoch=epoch, ce=float(np.mean(losses)), val_acc=acc, lr=lr))
        log.info("stage1 epoch %d ce=%.4f val_acc=%.2f lr=%.1e", epoch, stats[-1]["ce"], acc, lr)
        if checkpoint_path:
            save_checkpoint(model, run, checkpoint_path)
    if run.best_state is not None:
        model.load_state_arrays(run.best_state)
    return StageResult(snapshot(model), run, stats)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class PrefixCache:
    """Frozen-prefix activations per sample for both streams."""

    cdi_high: np.ndarray
    cdi_low: np.ndarray | None
    si_high: np.ndarray
    si_low: np.ndarray | None
    alpha: float

    def batch(self, idx) -> tuple[OctTensor, OctTensor]:
        def mk(h, l):
            return OctTensor(Tensor(h[idx]), Tensor(l[idx]) if l is not None else None, self.alpha)

        return mk(self.cdi_high, self.cdi_low), mk(self.si_high, self.si_low)


def build_prefix_cache(model: Detector, data: SampleSet, batch: int = 20) -> PrefixCache:
    """Run the frozen layers once (running statistics) over ``data``."""
    model.eval()
    parts: dict[str, list] = {"ch": [], "cl": [], "sh": [], "sl": []}
    with T.no_grad():
        for i in range(0, len(data), batch):
            zc, zs = model.forward_prefix(Tensor(data.cdi[i : i + batch]), Tensor(data.si[i : i + batch]))
            parts["ch"].append(zc.high.data)
            parts["sh"].append(zs.high.data)
            if zc.low is not None:
                parts["cl"].append(zc.low.data)
                parts["sl"].append(zs.low.data)
    cat = lambda k: np.concatenate(parts[k]) if parts[k] else None  # noqa: E731
    return PrefixCache(cat("ch"), cat("cl"), cat("sh"), cat("sl"), model.cfg.alpha)


def _suffix_logits(model: Detector, cache: PrefixCache, n: int, batch: int = 50) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, n, batch):
            idx = np.arange(i, min(n, i + batch))
            zc, zs = cache.batch(idx)
            out.append(model.forward_suffix(zc, zs).logits.data)
    return np.concatenate(out)


def penultimate_features(model: Detector, cache: PrefixCache, n: int, batch: int = 50) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, n, batch):
            zc, zs = cache.batch(np.arange(i, min(n, i + batch)))
            out.append(model.forward_suffix(zc, zs).penultimate.data)
    return np.concatenate(out)


def dataset_mmd(model: Detector, cache: PrefixCache, domains: np.ndarray) -> float:
    """MMD over the full per-domain penultimate feature sets, running
    statistics in every layer (no batch sampling noise)."""
    feats = penultimate_features(model, cache, len(domains))
    batches = [DomainBatch(int(d), Tensor(feats[domains == d]), np.zeros(0)) for d in sorted(set(domains.tolist()))]
    with T.no_grad():
        return mmd_distance(batches).item()


def _domain_schedule(rng: np.random.Generator, sizes: Sequence[int], batch: int) -> list[list[np.ndarray]]:
    """Per-step index lists: one pass over the largest domain, smaller
    domains cycled through fresh permutations."""
    n_steps = math.ceil(max(sizes) / batch)
    per_domain = []
    for n in sizes:
        need = n_steps * batch
        reps = math.ceil(need / n)
        seq = np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]
        per_domain.append(seq)
    steps = []
    for s in range(n_steps):
        steps.append([seq[s * batch : (s + 1) * batch] for seq in per_domain])
    # the largest domain's last batch may be short: trim that one only
    big = int(np.argmax(sizes))
    last = sizes[big] - (n_steps - 1) * batch
    steps[-1][big] = steps[-1][big][:last]
    return steps


def train_stage2(
    model: Detector,
    train: SampleSet,
    val: SampleSet,
    cfg: TrainConfig,
    lam: float,
    train_log: TrainLog | None = None,
    epochs: int | None = None,
    caches: tuple[PrefixCache, PrefixCache] | None = None,
    resume: RunState | None = None,
    checkpoint_path=None,
    max_epochs: int | None = None,
    track_mmd: bool = True,
) -> StageResult:
    """Fine-tune the final residual block of each backbone and the head with
    CE (mean over the union of per-domain sub-batches) + lam * MMD (over the
    per-domain penultimate features). ``train.domains`` assigns each sample
    to one of K >= 2 domains. With ``track_mmd`` the MMD over the whole
    training set is recorded after every epoch."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    domain_ids = sorted(set(int(d) for d in train.domains))
    if len(domain_ids) < 2:
        raise ValueError(f"stage 2 needs K >= 2 training domains, got {domain_ids}")
    if len(val) == 0:
        raise ValueError("stage 2 needs a non-empty validation split")
    members = [np.flatnonzero(train.domains == d) for d in domain_ids]
    if caches is None:
        caches = (build_prefix_cache(model, train), build_prefix_cache(model, val))
    train_cache, val_cache = caches
    model.freeze_for_finetune()
    params = model.trainable_parameters()
    run = resume or RunState(2, 0, PlateauState(cfg.lr_stage2, cfg.patience, cfg.threshold, cfg.lr_floor),
                             Adam(cfg.beta1, cfg.beta2, cfg.eps), cfg.seed, lam=float(lam))
    train_log = train_log or TrainLog()
    total_epochs = cfg.stage2_epochs if epochs is None else epochs
    limit = total_epochs if max_epochs is None else min(total_epochs, max_epochs)
    stats: list[dict] = []
    while run.epoch < limit and not run.sched.stopped:
        epoch = run.epoch + 1
        rng = _epoch_rng(run.seed, 2, epoch)
        steps = _domain_schedule(rng, [len(m) for m in members], cfg.stage2_batch)
        lr = run.sched.lr
        rows, ces, cdas = [], [], []
        for parts in steps:
            idx_per_domain = [members[d][p] for d, p in enumerate(parts)]
            idx = np.concatenate(idx_per_domain)
            model.set_finetune_mode()
            model.zero_grad()
            zc, zs = train_cache.batch(idx)
            out = model.forward_suffix(zc, zs)
            ce = T.softmax_cross_entropy(out.logits, train.labels[idx])
            bounds = np.cumsum([len(p) for p in idx_per_domain])[:-1]
            starts = np.r_[0, bounds]
            ends = np.r_[bounds, len(idx)]
            batches = [
                DomainBatch(d, out.penultimate[s:e], train.labels[idx][s:e])
                for d, s, e in zip(domain_ids, starts, ends)
            ]
            cda = mmd_distance(batches)
            loss = total_loss(ce, cda, lam)
            T.backward(loss.total)
            run.adam.step(params, lr)
            run.step += 1
            vals = loss.values()
            ces.append(vals["ce"])
            cdas.append(vals["cda"])
            rows.append(dict(step=run.step, epoch=epoch, stage=2, lr=lr, ce=vals["ce"], cda=vals["cda"],
                             **{"lambda": float(lam)}, total=vals["total"], val_acc=""))
        acc = accuracy(_suffix_logits(model, val_cache, len(val)), val.labels)
        full_mmd = dataset_mmd(model, train_cache, train.domains) if track_mmd else None
        rows[-1]["val_acc"] = acc
        train_log.extend(rows)
        if acc > run.best_acc:
            run.best_acc = f32(acc)
            run.best_state = snapshot(model)
        run.sched.update(acc)
        run.epoch = epoch
        stats.append(dict(epoch=epoch, ce=float(np.mean(ces)), cda=float(np.mean(cdas)), train_mmd=full_mmd,
                          val_acc=acc, lr=lr))
        log.info("stage2 lam=%g epoch %d ce=%.4f batch_mmd=%.5f train_mmd=%s val_acc=%.2f", lam, epoch,
                 stats[-1]["ce"], stats[-1]["cda"], "-" if full_mmd is None else f"{full_mmd:.5f}", acc)
        if checkpoint_path:
            save_checkpoint(model, run, checkpoint_path)
    model.eval()
    return StageResult(snapshot(model), run, stats)


def select_lambda(
    model: Detector,
    stage1_state: dict,
    train: SampleSet,
    val: SampleSet,
    cfg: TrainConfig,
    caches: tuple[PrefixCache, PrefixCache] | None = None,
) -> tuple[float, list[dict]]:
    """Probe every grid value with a short fine-tuning run from the stage-1
    weights; pick the one whose final-epoch CE and lambda*MMD are closest
    (ties go to the smaller lambda)."""
    model.load_state_arrays(stage1_state)
    if caches is None:
        caches = (build_prefix_cache(model, train), build_prefix_cache(model, val))
    probes = []
    for lam in sorted(cfg.lambda_grid):
        model.load_state_arrays(stage1_state)
        res = train_stage2(model, train, val, cfg, lam, epochs=cfg.probe_epochs, caches=caches, track_mmd=False)
        last = res.epoch_stats[-1]
        probes.append(dict(lam=lam, ce=last["ce"], cda=last["cda"]))
    model.load_state_arrays(stage1_state)
    return choose_lambda(probes), probes


def choose_lambda(probes: Sequence[dict]) -> float:
    """argmin |ce - lam * cda| over probe records, smaller lambda on ties."""
    best_lam, best_gap = None, math.inf
    for p in sorted(probes, key=lambda r: r["lam"]):
        gap = abs(p["ce"] - p["lam"] * p["cda"])
        if gap < best_gap:
            best_lam, best_gap = p["lam"], gap
    return best_lam
