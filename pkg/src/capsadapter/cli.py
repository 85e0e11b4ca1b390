"""Command-line entry point: ``capsadapter <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .clients import CLIP_MAX_TOKENS, HttpClients, StubClients
from .errors import CapsError, UsageError
from .evaluate import EvalReport, emit_report, per_class_accuracy, support_similarity, top1_accuracy
from .features import (
    FeatureMatrix,
    build_onehot,
    load_cache,
    load_meta,
    meta_path,
    save_cache,
    save_meta,
    write_json,
)
from .kernels import DEFAULT_TAU, METHODS, HyperParams, ablation_logits, method_logits
from .search import GridSpec, SupportCache, delta_sweep_grid, fixed_grid, make_grid, search
from .support import build_fewshot_cache, build_support_set, fewshot_caption_cache

log = logging.getLogger("capsadapter")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _read_labels(path) -> list[int]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("sample_classes", data.get("labels"))
    if not isinstance(data, list):
        raise CapsError(f"{path}: expected a list of class indices or a 'sample_classes' field")
    return [int(x) for x in data]


def _read_classes(path) -> list[str] | None:
    data = json.loads(Path(path).read_text())
    return data.get("classes") if isinstance(data, dict) else None


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise UsageError(f"input file not found: {p}")


def _run_record(path: Path, argv: list[str], args: argparse.Namespace) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    write_json(path, {
        "argv": list(argv),
        "subcommand": args.command,
        "config": config,
        "versions": {"capsadapter": __version__, "numpy": np.__version__, "python": platform.python_version()},
    })


def _record_beside(out: Path) -> Path:
    return out.with_name(out.name + ".run.json")


def cmd_build_support(args, argv):
    _require(args.dataset_file)
    spec = json.loads(Path(args.dataset_file).read_text())
    classes = spec["classes"]
    images = spec["images"]
    per_class = [images[c] for c in classes] if isinstance(images, dict) else images
    if args.stub_clients:
        clients = StubClients(seed=args.stub_seed)
    else:
        clients = HttpClients.from_env(
            {"caption": args.captioner_url, "generate": args.generator_url, "encode": args.encoder_url},
            timeout=args.timeout, max_retries=args.retries, backoff=args.backoff, token=args.token,
        )
    out = Path(args.out)
    s = build_support_set(
        classes, per_class, clients, k=args.k, m=args.m, base_seed=args.seed,
        dataset=args.dataset or spec.get("dataset", ""), max_tokens=args.max_tokens,
        workers=args.threads, out_dir=out, backbone=args.backbone,
    )
    log.info("wrote %d support records to %s", len(s.manifest["records"]), out)
    _run_record(out / "run.json", argv, args)


def cmd_build_fewshot(args, argv):
    _require(args.train, args.train_labels, args.classifier)
    train = load_cache(args.train)
    w = load_cache(args.classifier)
    classes = _read_labels(args.train_labels)
    names = _read_classes(args.train_labels) or [str(i) for i in range(w.rows)]
    img, labels = build_fewshot_cache(train, classes, args.k, args.seed, n_classes=w.rows)
    cap = fewshot_caption_cache(w, labels)
    out = Path(args.out)
    sample_classes = [int(c) for c in labels.classes]
    for name, mat in (("img.caps", img), ("cap.caps", cap)):
        save_cache(mat, out / name)
        save_meta(out / name, dataset=args.dataset, backbone=args.backbone, classes=names,
                  sample_classes=sample_classes, k=args.k, seed=args.seed)
    write_json(out / "labels.json", {"classes": names, "sample_classes": sample_classes})
    _run_record(out / "run.json", argv, args)


def _hyper(args) -> HyperParams:
    return HyperParams(args.alpha, args.beta, args.gamma, args.delta, args.tau)


def cmd_infer(args, argv):
    needs_support = args.mode != "zeroshot" or args.ablate
    needs_cap = args.mode in ("m_adapter", "f_variant") or args.ablate
    _require(args.test, args.classifier)
    if needs_support:
        if args.img is None or args.labels is None:
            raise UsageError(f"--img and --labels are required for mode {args.mode}")
        _require(args.img, args.labels)
    if needs_cap:
        if args.cap is None:
            raise UsageError(f"--cap is required for mode {args.mode}")
        _require(args.cap)
    f_test = load_cache(args.test)
    w = load_cache(args.classifier)
    f_img = load_cache(args.img) if needs_support else None
    f_cap = load_cache(args.cap) if needs_cap else None
    labels = build_onehot(_read_labels(args.labels), w.rows) if needs_support else None
    hp = _hyper(args)
    out = Path(args.out)

    if args.ablate:
        variants = ablation_logits(f_test, w, f_img, f_cap, labels, hp)
        outputs = {k: out.with_name(f"{out.stem}.{k.replace('+', '_')}{out.suffix}") for k in variants}
        for k, path in outputs.items():
            save_cache(FeatureMatrix(variants[k]), path)
            _write_logits_meta(path, args, f"ablation:{k}", hp, labels, None)
        _run_record(_record_beside(out), argv, args)
        return

    t0 = time.perf_counter()
    logits = method_logits(args.mode, f_test, w, f_img, f_cap, labels, hp)
    elapsed = time.perf_counter() - t0
    save_cache(FeatureMatrix(logits), out)
    _write_logits_meta(out, args, args.mode, hp, labels, elapsed if args.timing else None)
    _run_record(_record_beside(out), argv, args)


def _write_logits_meta(path, args, method, hp, labels, wall_time):
    classes = None
    if args.labels:
        classes = _read_classes(args.labels)
    if classes is None:
        classes = []
    support_size = 0
    if labels is not None:
        counts = labels.class_counts()
        support_size = int(counts.max()) if counts.size else 0
    extra = {
        "method": method,
        "hyperparams": {"alpha": hp.alpha, "beta": hp.beta, "gamma": hp.gamma, "delta": hp.delta, "tau": hp.tau},
        "support_size": support_size,
    }
    if wall_time is not None:
        extra["wall_time_s"] = wall_time
    save_meta(path, dataset=args.dataset, backbone=args.backbone, classes=classes, **extra)


def _grid(args) -> list[HyperParams]:
    if args.grid == "default":
        return make_grid(GridSpec(tau=args.tau))
    if args.grid == "delta-sweep":
        return delta_sweep_grid(args.alpha, args.beta, args.gamma, args.delta_points, tau=args.tau)
    if args.grid == "fixed":
        return fixed_grid(args.alpha, args.beta, args.gamma, args.delta, tau=args.tau)
    spec = GridSpec(
        alpha_range=tuple(args.alpha_range), alpha_points=args.alpha_points,
        beta_range=tuple(args.beta_range), beta_points=args.beta_points,
        gamma_range=tuple(args.gamma_range), gamma_points=args.gamma_points,
        delta_points=args.delta_points, alpha_spacing=args.alpha_spacing,
        beta_spacing=args.beta_spacing, gamma_spacing=args.gamma_spacing, tau=args.tau,
    )
    return make_grid(spec)


def cmd_search(args, argv):
    needs_cap = args.mode in ("m_adapter", "f_variant")
    if needs_cap and args.cap is None:
        raise UsageError(f"--cap is required for mode {args.mode}")
    _require(args.val, args.val_labels, args.img, args.cap, args.classifier, args.labels)
    w = load_cache(args.classifier)
    cache = SupportCache(
        w=w,
        f_img=load_cache(args.img),
        f_cap=load_cache(args.cap) if needs_cap else None,
        labels=build_onehot(_read_labels(args.labels), w.rows),
    )
    result = search(load_cache(args.val), _read_labels(args.val_labels), cache, _grid(args),
                    mode=args.mode, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write_csv(out)
    result.write_best(out.with_name(out.stem + ".best.json"))
    b = result.best
    print(f"best alpha={b.alpha} beta={b.beta} gamma={b.gamma} delta={b.delta} "
          f"accuracy={100 * result.best_accuracy:.2f} over {result.evaluations} points")
    _run_record(_record_beside(out), argv, args)


def cmd_eval(args, argv):
    _require(args.logits_dir, args.test_labels)
    y = _read_labels(args.test_labels)
    reports = []
    for path in sorted(Path(args.logits_dir).glob("*.caps")):
        logits = load_cache(path).data
        meta = load_meta(path) if meta_path(path).exists() else {}
        n_classes = logits.shape[1]
        reports.append(EvalReport(
            method=meta.get("method", path.stem),
            backbone=meta.get("backbone", ""),
            dataset=meta.get("dataset", ""),
            support_size=int(meta.get("support_size", 0)),
            top1=top1_accuracy(logits, y),
            per_class=per_class_accuracy(logits, y, n_classes),
            similarity=meta.get("similarity"),
            wall_time_s=meta.get("wall_time_s"),
        ))
    if not reports:
        raise CapsError(f"no .caps logits found in {args.logits_dir}")
    out = Path(args.out)
    emit_report(reports, out, args.format)
    _run_record(_record_beside(out), argv, args)


def cmd_similarity(args, argv):
    _require(args.support, args.support_labels, args.test, args.test_labels)
    value = support_similarity(
        load_cache(args.support), _read_labels(args.support_labels),
        load_cache(args.test), _read_labels(args.test_labels),
        per_class=not args.global_pairs,
    )
    print(f"{value:.2f}")
    if args.out:
        out = Path(args.out)
        write_json(out, {"similarity": value, "per_class": not args.global_pairs})
        _run_record(_record_beside(out), argv, args)


def _add_hp(p, delta_default=0.0):
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=delta_default)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="zero-shot logit scale")


def _add_tags(p):
    p.add_argument("--dataset", default="")
    p.add_argument("--backbone", default="")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capsadapter", description="Training-free caption-based support set adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-support", help="caption, generate and encode a support set")
    p.add_argument("--dataset-file", required=True,
                   help="JSON with 'classes' and 'images' (list per class or mapping name -> refs)")
    p.add_argument("--k", type=int, required=True, help="training images captioned per class")
    p.add_argument("--m", type=int, required=True, help="support samples generated per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-tokens", type=int, default=CLIP_MAX_TOKENS)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--stub-clients", action="store_true")
    p.add_argument("--stub-seed", type=int, default=0)
    p.add_argument("--captioner-url")
    p.add_argument("--generator-url")
    p.add_argument("--encoder-url")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--backoff", type=float, default=0.5)
    p.add_argument("--token", help="bearer token passed to every service")
    _add_tags(p)
    p.set_defaults(func=cmd_build_support)

    p = sub.add_parser("build-fewshot", help="sample a support cache from real training features")
    p.add_argument("--train", required=True)
    p.add_argument("--train-labels", required=True)
    p.add_argument("--classifier", required=True, help="class text embeddings for the caption cache")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_tags(p)
    p.set_defaults(func=cmd_build_fewshot)

    p = sub.add_parser("infer", help="compute logits for a test cache")
    p.add_argument("--mode", choices=METHODS, default="m_adapter")
    p.add_argument("--test", required=True)
    p.add_argument("--img")
    p.add_argument("--cap")
    p.add_argument("--classifier", required=True)
    p.add_argument("--labels", help="support labels JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="record wall time in the logits metadata")
    p.add_argument("--ablate", action="store_true", help="write one logits file per term combination")
    p.add_argument("--threads", type=int, default=1)
    _add_hp(p)
    _add_tags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("search", help="grid search on a validation split")
    p.add_argument("--mode", choices=("tipx", "m_adapter", "f_variant"), default="m_adapter")
    p.add_argument("--val", required=True)
    p.add_argument("--val-labels", required=True)
    p.add_argument("--img", required=True)
    p.add_argument("--cap")
    p.add_argument("--classifier", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--grid", choices=("default", "delta-sweep", "fixed", "custom"), default="default")
    p.add_argument("--alpha-range", type=float, nargs=2, default=(0.1, 50.0))
    p.add_argument("--alpha-points", type=int, default=7)
    p.add_argument("--alpha-spacing", choices=("linear", "log"), default="log")
    p.add_argument("--beta-range", type=float, nargs=2, default=(1.0, 50.0))
    p.add_argument("--beta-points", type=int, default=7)
    p.add_argument("--beta-spacing", choices=("linear", "log"), default="linear")
    p.add_argument("--gamma-range", type=float, nargs=2, default=(0.1, 30.0))
    p.add_argument("--gamma-points", type=int, default=7)
    p.add_argument("--gamma-spacing", choices=("linear", "log"), default="log")
    p.add_argument("--delta-points", type=int, default=11)
    p.add_argument("--out", required=True, help="CSV search log")
    p.add_argument("--threads", type=int, default=1)
    _add_hp(p, delta_default=0.1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="accuracy report over a directory of logits caches")
    p.add_argument("--logits-dir", required=True)
    p.add_argument("--test-labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("similarity", help="support/test CLIP similarity in percent")
    p.add_argument("--support", required=True)
    p.add_argument("--support-labels", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--test-labels", required=True)
    p.add_argument("--global", dest="global_pairs", action="store_true",
                   help="average over all pairs instead of same-class pairs")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_similarity)
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        args.func(args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (CapsError, OSError, ValueError, KeyError) as exc:
        print(f"capsadapter: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
