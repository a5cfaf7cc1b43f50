"""Command line entry point: synth, inspect, train, eval, protocol.

Results go to stdout as JSON; logs go to stderr. Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import harness, synthgen
from . import preprocess as pp
from .checkpoint import CheckpointFormatError
from .model import Detector, ModelConfig
from .tensor import NonFiniteError
from .trainer import (
    TrainConfig,
    TrainLog,
    build_prefix_cache,
    load_checkpoint,
    load_model,
    model_config_from,
    save_checkpoint,
    select_lambda,
    snapshot,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("octforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# keys a config file may set, with defaults; flags override file values
TRAIN_DEFAULTS = {
    "depth": "desk-10",
    "alpha": 0.25,
    "stage1_epochs": TrainConfig.stage1_epochs,
    "stage2_epochs": TrainConfig.stage2_epochs,
    "probe_epochs": TrainConfig.probe_epochs,
    "stage1_batch": TrainConfig.stage1_batch,
    "stage2_batch": TrainConfig.stage2_batch,
    "lambda": "auto",
}
PROTOCOL_DEFAULTS = {**TRAIN_DEFAULTS, "count": 200, "repeats": 1, "seed": 0}


class UsageError(Exception):
    pass


def threads() -> int:
    raw = os.environ.get("OCTFORGE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"OCTFORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("OCTFORGE_THREADS must be >= 1")
    return n


def emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flag > config file > default; unknown file keys are a usage error."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise harness.DataError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key.replace("-", "_"), None) if key != "lambda" else args.lam
        out[key] = flag if flag is not None else file_cfg.get(key, default)
    log.info("resolved config: %s", json.dumps(out, sort_keys=True))
    return out


def parse_lambda(value) -> float | str:
    if value == "auto":
        return value
    try:
        lam = float(value)
    except (TypeError, ValueError):
        raise UsageError(f"--lambda must be 'auto' or a number, got {value!r}") from None
    if lam < 0:
        raise UsageError("--lambda must be non-negative")
    return lam


def train_config(cfg: dict, seed: int) -> TrainConfig:
    try:
        return TrainConfig(stage1_epochs=int(cfg["stage1_epochs"]), stage2_epochs=int(cfg["stage2_epochs"]),
                           probe_epochs=int(cfg["probe_epochs"]), stage1_batch=int(cfg["stage1_batch"]),
                           stage2_batch=int(cfg["stage2_batch"]), seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    families = tuple(f.strip() for f in args.families.split(",") if f.strip())
    bad = [f for f in families if f not in synthgen.FAMILIES]
    if bad or not families:
        raise UsageError(f"unknown families {bad}; choose from {synthgen.FAMILIES}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = synthgen.write_corpus(out, args.seed, args.count, families)
    except OSError as exc:
        raise harness.DataError(f"cannot write corpus to {out}: {exc}") from None
    emit({"out": str(out), "manifest": str(out / "manifest.csv"), "rows": len(records)})
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        img = pp.load_rgb(args.image)
    except (OSError, ValueError) as exc:
        raise harness.DataError(f"cannot read image {args.image}: {exc}") from None
    stem = Path(args.image).stem
    result = {"image": str(args.image), "height": img.shape[0], "width": img.shape[1], "hf_cdi": pp.cdi_hf(img)}
    if args.dump_cdi is not None:
        dst = args.dump_cdi or f"{stem}_cdi.png"
        pp.cdi_to_png(pp.channel_differences(img) / 255.0, dst)
        result["cdi_png"] = str(dst)
    if args.dump_si is not None:
        dst = args.dump_si or f"{stem}_si.png"
        pp.si_to_png(pp.minmax(pp.log_magnitude(pp.luminance(img)))[None], dst)
        result["si_png"] = str(dst)
    emit(result)
    return EXIT_OK


def _train_sets(manifest, seed: int, domains_flag: str | None):
    records = harness.load_manifest(manifest)
    fakes = sorted({r.domain for r in records if r.label == "fake"})
    if domains_flag:
        fakes = [d.strip() for d in domains_flag.split(",") if d.strip()]
    reals = sorted({r.domain for r in records if r.label == "real"})
    if len(reals) != 1:
        raise harness.DataError(f"expected exactly one real domain, found {reals}")
    spec = harness.ProtocolSpec("train", fakes, None, real_domain=reals[0])
    keep = set(fakes) | set(reals)
    missing = sorted(keep - {r.domain for r in records})
    if missing:
        raise harness.DataError(f"manifest lacks domains {missing}")
    records = [r for r in records if r.domain in keep]
    split = harness.split_dataset(records, seed)
    store = harness.ImageStore(Path(manifest).parent, threads())
    store.phase = "train"
    tr = harness._samples_with_domains(split.train, store, spec, harness.domain_assignment(split.train, spec))
    va = harness._samples_with_domains(split.val, store, spec, harness.domain_assignment(split.val, spec))
    return tr, va


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    lam = parse_lambda(cfg["lambda"])
    tcfg = train_config(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = _train_sets(args.manifest, args.seed, args.domains)
    tlog = TrainLog(out / "train_log.csv")
    last = out / "last.octf"
    stop = args.stop_after
    if stop is not None and stop < 1:
        raise UsageError("--stop-after must be >= 1")

    run1 = run2 = None
    if args.resume:
        arrays = ckpt.load(args.resume)
        model = Detector(model_config_from(arrays, args.seed))
        state = load_checkpoint(args.resume, model, tcfg)
        if state.seed != args.seed:
            raise UsageError(f"--seed {args.seed} differs from the checkpoint's seed {state.seed}")
        run1, run2 = (state, None) if state.stage == 1 else (None, state)
        if run2 is not None:
            lam = run2.lam
    else:
        model = Detector(ModelConfig(cfg["depth"], float(cfg["alpha"]), args.seed))
        if args.stage == "2":
            if not args.init:
                raise UsageError("--stage 2 needs --init STAGE1_CHECKPOINT (or --resume)")
            model.load_state_arrays(load_model(args.init).state_arrays())

    result: dict = {"seed": args.seed, "out": str(out)}

    def interrupted():
        result["interrupted"] = True
        result["checkpoint"] = str(last)
        emit(result)
        return EXIT_OK

    if args.stage in ("1", "all") and run2 is None:
        start = run1.epoch if run1 else 0
        s1 = train_stage1(model, train, val, tcfg, tlog, resume=run1, checkpoint_path=last,
                          max_epochs=None if stop is None else start + stop)
        result["stage1"] = {"epochs": s1.run.epoch, "best_val_acc": s1.run.best_acc}
        finished = s1.run.epoch >= tcfg.stage1_epochs or s1.run.sched.stopped
        if stop is not None:
            stop -= s1.run.epoch - start
        if not finished or (stop == 0 and args.stage == "all"):
            return interrupted()
        save_checkpoint(model, s1.run, out / "stage1.octf")
    if args.stage in ("2", "all"):
        caches = (build_prefix_cache(model, train), build_prefix_cache(model, val))
        if lam == "auto":
            lam, probes = select_lambda(model, snapshot(model), train, val, tcfg, caches)
            result["lambda_probes"] = probes
        start = run2.epoch if run2 else 0
        s2 = train_stage2(model, train, val, tcfg, float(lam), tlog, caches=caches, resume=run2,
                          checkpoint_path=last, max_epochs=None if stop is None else start + stop)
        result["stage2"] = {"epochs": s2.run.epoch, "final_train_mmd": s2.epoch_stats[-1]["train_mmd"]
                            if s2.epoch_stats else None}
        result["lambda"] = float(lam)
        if s2.run.epoch < tcfg.stage2_epochs and not s2.run.sched.stopped:
            return interrupted()
        save_checkpoint(model, s2.run, out / "model.octf")
        result["checkpoint"] = str(out / "model.octf")
    else:
        result["checkpoint"] = str(out / "stage1.octf")
    result["log"] = str(out / "train_log.csv")
    emit(result)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    clf = harness.model_classifier(model)
    if args.image:
        try:
            img = pp.load_rgb(args.image)
        except (OSError, ValueError) as exc:
            raise harness.DataError(f"cannot read image {args.image}: {exc}") from None
        v = harness.predict_image(img, clf)
        emit({"image": str(args.image), "verdict": v.label, "crops": v.crop_labels,
              "fusion_weights": {"cdi": v.weights[0], "si": v.weights[1]}})
        return EXIT_OK
    records = harness.load_manifest(args.manifest)
    store = harness.ImageStore(Path(args.manifest).parent, threads())
    store.phase = "eval"
    samples = harness.build_samples(records, store, {d: i for i, d in enumerate(sorted({r.domain for r in records}))})
    crop_pred, verdicts = harness.predict_samples(samples, len(records), clf)
    m = harness.compute_metrics([v.label for v in verdicts], [r.label for r in records], [r.domain for r in records])
    w = np.mean([v.weights for v in verdicts], axis=0)
    emit({"accuracy": m.accuracy, "crop_accuracy": 100.0 * float(np.mean(crop_pred == samples.labels)),
          "n": m.n, "confusion": m.confusion, "per_domain": m.per_domain,
          "mean_fusion_weights": {"cdi": float(w[0]), "si": float(w[1])}})
    return EXIT_OK


def cmd_protocol(args) -> int:
    cfg = resolve(args, PROTOCOL_DEFAULTS)
    lam = parse_lambda(cfg["lambda"])
    spec = harness.resolve_protocol(args.spec)
    seed = int(cfg["seed"])
    if args.manifest:
        manifest = Path(args.manifest)
    else:
        corpus = Path(args.corpus or f"octforge-corpus-s{seed}-n{cfg['count']}")
        manifest = corpus / "manifest.csv"
        if not manifest.is_file():
            families = [d for d in synthgen.FAMILIES if d in set(spec.train_domains) | {spec.test_domain}]
            log.info("generating synthetic corpus in %s", corpus)
            corpus.mkdir(parents=True, exist_ok=True)
            synthgen.write_corpus(corpus, seed, int(cfg["count"]), families)
    records = harness.load_manifest(manifest)
    store = harness.ImageStore(manifest.parent, threads())
    opts = harness.RunOptions(ModelConfig(cfg["depth"], float(cfg["alpha"]), seed), train_config(cfg, seed), lam,
                              args.log)
    report = harness.run_repeats(spec, records, store, opts, int(cfg["repeats"]))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    emit(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of defaults (flags win)")
    p.add_argument("--depth", choices=["desk-10", "resnet-34"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--probe-epochs", type=int)
    p.add_argument("--stage1-batch", type=int)
    p.add_argument("--stage2-batch", type=int, help="per-domain batch size in stage 2")
    p.add_argument("--lambda", dest="lam", help="'auto' or a non-negative number")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="octforge", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200, help="images per class and family")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--families", default=",".join(synthgen.FAMILIES))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="HF(CDI) statistic and debug dumps for one image")
    p.add_argument("image")
    p.add_argument("--dump-cdi", nargs="?", const="", metavar="PNG")
    p.add_argument("--dump-si", nargs="?", const="", metavar="PNG")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="two-stage training on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--out", default="run")
    p.add_argument("--domains", help="comma list of fake domains to train on (default: all)")
    p.add_argument("--init", help="stage-1 checkpoint for --stage 2")
    p.add_argument("--resume", help="continue from a last.octf checkpoint")
    p.add_argument("--stop-after", type=int, help="stop after training this many epochs in this invocation")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="classify one image or score a manifest")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--image")
    g.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", help="cross-manipulation protocol run")
    p.add_argument("--spec", required=True, help=f"preset ({', '.join(harness.PROTOCOLS)}) or JSON file")
    p.add_argument("--manifest", help="corpus manifest (default: generate a synthetic corpus)")
    p.add_argument("--corpus", help="directory for the generated corpus")
    p.add_argument("--count", type=int, help="synthetic images per class and family")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, help="seeded repetitions to average")
    p.add_argument("--out", help="write the JSON report here as well")
    p.add_argument("--log", help="training log CSV")
    _add_training_flags(p)
    p.set_defaults(func=cmd_protocol)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        with threadpool_limits(threads()):
            return args.func(args)
    except UsageError as exc:
        print(f"octforge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (harness.DataError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"octforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"octforge: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
