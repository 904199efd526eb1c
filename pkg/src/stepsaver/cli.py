"""Command-line entry point: ``stepsaver <command> ...``.

Every command exits 0 on success. Failures print a single line
``error: <kind>: <message>`` to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import classifier as clf
from . import dataset as ds
from . import report as rpt
from . import service as svc
from . import sweep as swp
from ._tsv import escape
from .metrics import SsimParams


def _classes(text: str) -> frozenset[int]:
    try:
        values = frozenset(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("at least one class is required")
    return values


def cmd_label(args) -> int:
    params = SsimParams(window_size=args.window, gaussian_sigma=args.sigma)
    sweeps, errors = [], []
    for item in swp.read_manifest(args.manifest):
        (errors if isinstance(item, swp.LabelError) else sweeps).append(item)
    labels = []
    for result in swp.label_corpus(sweeps, params, workers=args.workers):
        if isinstance(result, swp.LabelError):
            errors.append(result)
        else:
            labels.append(result)
    swp.write_labels(args.out, labels)
    for err in errors:
        print(f"skipped\t{escape(err.prompt)}\t{err.cause}", file=sys.stderr)
    hist = swp.label_histogram(labels)
    fallback = sum(lab.rule is swp.Rule.FALLBACK_MAX for lab in labels)
    print(f"labeled {len(labels)} sweeps ({fallback} fallback_max), {len(errors)} errors")
    for steps, n in hist.items():
        print(f"{steps}\t{n}")
    return 0


def cmd_dataset(args) -> int:
    rows = []
    for lab in swp.read_labels(args.labels):
        if args.drop_fallback and lab.rule is swp.Rule.FALLBACK_MAX:
            continue
        rows.append(ds.LabeledPrompt(lab.prompt, lab.steps))
    kept, dropped = ds.filter_english(rows)
    balanced = ds.balance(kept, ds.BalanceConfig(keep_classes=args.keep, seed=args.seed))
    split = ds.split(balanced, args.test_count, seed=args.seed)
    ds.write_dataset(split, args.out)
    print(f"input {len(rows)} rows, dropped {dropped} non-English, balanced to {len(balanced)}")
    for name, part in split.parts().items():
        print(f"{name}\t{len(part)}\t{ds.class_counts(part)}")
    return 0


def cmd_train(args) -> int:
    if len(args.classes) != 2:
        raise ValueError(f"--classes needs exactly two step counts, got {sorted(args.classes)}")
    data = ds.read_dataset(args.data)
    extractor = clf.fit_features(
        [r.prompt for r in data.train],
        clf.FeatureExtractor(hash_dim=args.hash_dim, weighting=args.weighting),
    )
    cfg = clf.TrainConfig(learning_rate=args.lr, train_batch=args.batch, eval_batch=args.eval_batch,
                          epochs=args.epochs, seed=args.seed, l2=args.l2)
    result = clf.train(data.train, data.validation, extractor, cfg, classes=tuple(sorted(args.classes)))
    lines = [clf.format_epoch_log(h) for h in result.history]
    print("epoch\ttrain_loss\tval_bce\tval_acc\tval_f1")
    print("\n".join(lines))
    if args.metrics_log:
        Path(args.metrics_log).write_text("\n".join(lines) + "\n", encoding="utf-8")
    clf.save_model(result.model, extractor, args.out)
    return 0


def cmd_eval(args) -> int:
    model = clf.LinearStepClassifier.load(args.model)
    rows = getattr(ds.read_dataset(args.data), args.split)
    if args.balanced:
        rows = ds.balance(rows, ds.BalanceConfig(keep_classes=frozenset(model.classes), seed=args.seed))
    rep = model.evaluate(rows)
    (tn, fp), (fn, tp) = rep.confusion
    doc = {"split": args.split, "rows": len(rows), "bce_loss": rep.bce_loss, "accuracy": rep.accuracy,
           "f1": rep.f1, "confusion": {"tn": tn, "fp": fp, "fn": fn, "tp": tp}}
    print(json.dumps(doc, indent=2))
    return 0


def cmd_recommend(args) -> int:
    model = clf.LinearStepClassifier.load(args.model)
    if args.prompt is not None:
        rec = svc.recommend(model, args.prompt)
        print(f"{rec.steps}\t{rec.probability:.6f}")
        return 0
    if not (args.input and args.out):
        raise ValueError("give --prompt, or both --input and --out")
    summary = svc.batch_recommend(model, args.input, args.out)
    print(f"{summary.lines} lines, {summary.errors} errors")
    for steps, n in summary.counts.items():
        print(f"{steps}\t{n}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    cfg = svc.ServiceConfig.from_env(model_path=args.model, backend_url=args.backend_url, listen=args.listen,
                                     backend_timeout_ms=args.backend_timeout_ms, max_in_flight=args.max_in_flight)
    app = svc.create_app(cfg)
    host, port = svc.parse_listen(cfg.listen)
    uvicorn.run(app, host=host, port=port, log_level=args.log_level, access_log=False)
    return 0


def cmd_mock_backend(args) -> int:
    import uvicorn

    app = svc.create_mock_backend(svc.MockTiming(scale=args.time_scale), fail_first=args.fail_first)
    host, port = svc.parse_listen(args.listen)
    uvicorn.run(app, host=host, port=port, log_level="warning", access_log=False)
    return 0


def cmd_report(args) -> int:
    if args.counts:
        counts = rpt.read_step_table(args.counts, int)
    elif args.recommendations:
        counts = svc.tally_recommendations(args.recommendations)
    else:
        raise ValueError("give --counts or --recommendations")
    times = rpt.read_step_table(args.times, str)
    fallback = None
    if len(times) >= 2:
        fallback = rpt.fit_time_model([rpt.TimingSample(s, float(t)) for s, t in times.items()])
    report = rpt.savings_report(counts, times, args.policies.split(","), args.baseline, fallback)
    print(rpt.render_report(report))
    if args.json_out:
        Path(args.json_out).write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_fid(args) -> int:
    res = rpt.fid_eval(args.generated, args.reference)
    print(json.dumps({"fid": res.value, "dim": res.dim, "generated_count": res.generated_count,
                      "reference_count": res.reference_count}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stepsaver", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("label", help="label step sweeps with the first-decline SSIM rule")
    p.add_argument("--manifest", required=True, help="sweep manifest: prompt<TAB>steps:path[,steps:path...]")
    p.add_argument("--out", required=True, help="labels output: prompt<TAB>steps<TAB>rule")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--window", type=int, default=11)
    p.add_argument("--sigma", type=float, default=1.5)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("dataset", help="filter, balance and split labels into a dataset directory")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep", type=_classes, default=frozenset({30, 50}), help="comma-separated classes to keep")
    p.add_argument("--test-count", type=int, default=2757)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drop-fallback", action="store_true", help="discard sweeps that never declined")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the step classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--eval-batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--hash-dim", type=int, default=1 << 16)
    p.add_argument("--weighting", choices=clf.WEIGHTINGS, default="binary")
    p.add_argument("--classes", type=_classes, default=frozenset({30, 50}))
    p.add_argument("--metrics-log", help="write epoch<TAB>train_loss<TAB>val_bce<TAB>val_acc<TAB>val_f1 lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=ds.PART_NAMES, default="test")
    p.add_argument("--balanced", action="store_true", help="undersample the split to equal classes first")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recommend", help="recommend steps for one prompt or a file of prompts")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt")
    p.add_argument("--input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("serve", help="run the recommendation service")
    p.add_argument("--model", help=f"model file (env {svc.ENV_MODEL})")
    p.add_argument("--listen", help=f"host:port (env {svc.ENV_LISTEN}, default 127.0.0.1:8000)")
    p.add_argument("--backend-url", help=f"txt2img endpoint URL (env {svc.ENV_BACKEND_URL})")
    p.add_argument("--backend-timeout-ms", type=int)
    p.add_argument("--max-in-flight", type=int)
    p.add_argument("--log-level", default="warning")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("mock-backend", help="run the mock txt2img backend")
    p.add_argument("--listen", default="127.0.0.1:7860")
    p.add_argument("--time-scale", type=float, default=0.001)
    p.add_argument("--fail-first", type=int, default=0)
    p.set_defaults(func=cmd_mock_backend)

    p = sub.add_parser("report", help="generation-time savings of step policies")
    p.add_argument("--counts", help="steps<TAB>count lines")
    p.add_argument("--recommendations", help="batch recommend output to tally instead of --counts")
    p.add_argument("--times", required=True, help="steps<TAB>seconds lines")
    p.add_argument("--policies", default=",".join(rpt.DEFAULT_POLICIES))
    p.add_argument("--baseline", default="fixed-50")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fid", help="Frechet distance between generated and reference features")
    p.add_argument("--generated", required=True, help="feature file or image directory")
    p.add_argument("--reference", required=True, help="feature file or image directory")
    p.set_defaults(func=cmd_fid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
