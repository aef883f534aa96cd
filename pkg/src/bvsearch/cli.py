"""Command-line interface.

Exit codes: 0 results found, 1 nothing accepted (or nothing retrieved),
2 usage, validation or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import ConfigurationError, FeatureSet, FormatError, UsageError
from .engine import VisualSearchEngine
from .eval import (
    HomographyJitter,
    SyntheticSceneConfig,
    evaluate,
    generate_synthetic,
    read_ground_truth,
    write_synthetic,
)
from .geometry import GVConfig, verify
from .index import EngineState, add_image, entry_size, layout_sizes, load, read_descriptor_file, save
from .scoring import Scheme, ScoringConfig, search

log = logging.getLogger("bvsearch")

SCHEMES = [s.value for s in Scheme]


class CliError(Exception):
    """Reported on stderr and mapped to exit code 2."""


def _descriptor_paths(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"descriptor directory not found: {directory}")
    return sorted(set(d.glob("*.bfds")))


def _read_dir(directory: str, n_bits: int | None = None) -> list[tuple[Path, FeatureSet]]:
    return [(p, read_descriptor_file(p, n_bits)[0]) for p in _descriptor_paths(directory)]


def _manifest_path(engine: str | Path) -> Path:
    return Path(str(engine) + ".manifest.tsv")


def _read_manifest(engine: str | Path) -> dict[int, str]:
    path = _manifest_path(engine)
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            i, name = line.split("\t", 1)
            out[int(i)] = name
    return out


def _load_engine(path: str) -> EngineState:
    if not Path(path).is_file():
        raise CliError(f"engine file not found: {path}")
    return load(path)


def _gv_config(args) -> GVConfig | None:
    if args.gv == "off":
        return None
    return GVConfig(top_r=args.top_r, min_inliers=args.min_inliers, inlier_px=args.inlier_px,
                    dedup_px=args.dedup_px, max_iterations=args.gv_iterations,
                    convexity_check=args.gv == "cc", seed=args.seed)


def _check_positive(parser, args, *names):
    for name in names:
        value = getattr(args, name, None)
        if value is not None and not value > 0:
            parser.error(f"--{name.replace('_', '-')} must be positive, got {value}")


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.jitter == "auto":
        jitter = HomographyJitter.none() if args.noise == 0 else HomographyJitter()
    else:
        jitter = HomographyJitter.none() if args.jitter == "none" else HomographyJitter()
    cfg = SyntheticSceneConfig(
        n_images=args.images, features_per_image=args.features, bit_flip_prob=args.noise,
        homography_jitter=jitter, feature_dropout_prob=args.dropout, seed=args.seed,
        n_queries=args.queries if args.queries is not None else args.images,
        n_distractors=args.distractors, n_training=args.training,
    )
    bench = generate_synthetic(cfg)
    gt = write_synthetic(bench, args.out)
    print(f"wrote {len(bench.references)} references, {len(bench.queries)} queries, "
          f"{len(bench.distractors)} distractors, {len(bench.training)} training descriptors")
    print(f"ground truth: {gt}")
    return 0


def cmd_train(args) -> int:
    files = _read_dir(args.descriptors)
    if not files:
        raise CliError(f"no .bfds files in {args.descriptors}")
    widths = {fs.n_bits for _, fs in files}
    if len(widths) != 1:
        raise CliError(f"training files have mixed descriptor widths: {sorted(widths)}")
    n_bits = widths.pop()
    X = np.concatenate([fs.descriptors for _, fs in files])
    if args.words > len(X):
        raise UsageError(f"--words {args.words} exceeds the {len(X)} training descriptors "
                         "(need at least one descriptor per visual word)")
    if args.substring_bits % 8 or not 8 <= args.substring_bits <= n_bits:
        raise UsageError(f"--substring-bits must be a multiple of 8 in [8, {n_bits}], got {args.substring_bits}")
    est = VisualSearchEngine(n_words=args.words, t_bits=args.substring_bits, th_init=args.th_init,
                             th_step=args.th_step, max_iter=args.max_iter, random_state=args.seed).fit(X)
    written = est.save(args.out)
    print(f"N={est.state_.n_words} T={est.state_.t_bits} D={n_bits}")
    print(f"wrote {written} bytes to {args.out}")
    return 0


def cmd_index(args) -> int:
    state = _load_engine(args.engine)
    start = state.index.n_images
    paths = _descriptor_paths(args.descriptors)
    manifest = _read_manifest(args.engine)
    for path in paths:
        fs, meta = read_descriptor_file(path)
        if fs.n_bits != state.n_bits:
            raise UsageError(f"{path}: descriptor width {fs.n_bits} does not match engine width {state.n_bits}")
        manifest[state.index.n_images] = path.name
        add_image(state.index.n_images, fs, state)
    written = save(state, args.out)
    _manifest_path(args.out).write_text("".join(f"{i}\t{manifest[i]}\n" for i in sorted(manifest)))
    idx = state.index
    sizes = layout_sizes(state.n_bits, state.n_words, state.t_bits, idx.n_images, idx.n_entries)
    print(f"indexed {idx.n_images - start} images ({idx.n_images} total), {idx.n_entries} features")
    print(f"bytes per feature: {entry_size(state.t_bits)} (6 + T/8 with T={state.t_bits})")
    print(f"posting payload: {sizes['postings']} bytes ({sizes['postings'] / 1e6:.2f} MB)")
    print(f"vocabulary: {sizes['vocabulary']} bytes, dictionary: {sizes['dictionary']} bytes")
    print(f"wrote {written} bytes to {args.out}")
    return 0


def cmd_search(args) -> int:
    state = _load_engine(args.engine)
    query, _ = read_descriptor_file(args.query)
    if query.n_bits != state.n_bits:
        raise UsageError(f"query descriptor width {query.n_bits} does not match engine width {state.n_bits}")
    scoring = ScoringConfig(args.scoring, args.k, args.sigma)
    gv = _gv_config(args)
    names = _read_manifest(args.engine)
    votes = search(query, state, scoring)
    ranking = votes.ranking()
    shown = ranking[:args.top]
    result = {
        "query": str(args.query),
        "scoring": scoring.scheme.value,
        "ranking": [{"image_id": int(i), "name": names.get(int(i)), "score": float(votes.scores[i])} for i in shown],
    }
    found = len(ranking) > 0
    if gv is not None:
        reports = verify(ranking, votes, state, gv)
        result["gv"] = [{
            "image_id": r.image_id, "name": names.get(r.image_id), "raw_inliers": r.raw_inliers,
            "deduped_inliers": r.deduped_inliers, "convex": bool(r.convex), "final_score": r.final_score,
            "accepted": bool(r.accepted),
            "homography": None if r.homography is None else r.homography.h.tolist(),
        } for r in reports]
        result["accepted"] = [r.image_id for r in reports if r.accepted]
        found = bool(result["accepted"])
    if args.json:
        print(json.dumps(result))
    else:
        print(f"{'rank':>4}  {'image':>6}  {'score':>12}  name")
        for rank, row in enumerate(result["ranking"], start=1):
            print(f"{rank:>4}  {row['image_id']:>6}  {row['score']:>12.4f}  {row['name'] or ''}")
        if gv is not None:
            print(f"\ngeometric verification ({args.gv}, min_inliers={gv.min_inliers})")
            print(f"{'image':>6}  {'raw':>5}  {'dedup':>5}  {'convex':>6}  {'score':>5}  verdict")
            for r in result["gv"]:
                print(f"{r['image_id']:>6}  {r['raw_inliers']:>5}  {r['deduped_inliers']:>5}  "
                      f"{str(r['convex']):>6}  {r['final_score']:>5}  {'ACCEPT' if r['accepted'] else 'reject'}")
    return 0 if found else 1


def _format_report(rows) -> str:
    lines = ["# summary",
             f"{'scheme':<7} {'gv':<4} {'queries':>7} {'distr':>6} {'MAP':>8} {'top1':>8} {'zeroFP':>8} "
             f"{'acc_tp':>6} {'acc_fp':>6} {'t_quant':>8} {'t_hamm':>8} {'t_gv':>8} {'t_total':>8}"]
    for r in rows:
        t = r.timing
        lines.append(f"{r.scheme:<7} {r.gv_mode:<4} {r.n_queries:>7} {r.n_distractors:>6} {r.map:>8.4f} "
                     f"{r.top1_recall:>8.4f} {r.zero_fp_accuracy:>8.4f} {r.accepted_true:>6} "
                     f"{r.accepted_distractors:>6} {t.get('quantize', 0):>8.4f} {t.get('hamming', 0):>8.4f} "
                     f"{t.get('gv', 0):>8.4f} {t.get('total', 0):>8.4f}")
    lines.append("")
    lines.append("# MAP")
    lines.extend(f"{r.scheme}/{r.gv_mode}\t{r.map:.6f}" for r in rows)
    lines.append("")
    lines.append("# zero-false-positive accuracy")
    lines.extend(f"{r.scheme}/{r.gv_mode}\t{r.zero_fp_accuracy:.6f}" for r in rows)
    lines.append("")
    lines.append("# ROC (threshold, tpr, fpr)")
    for r in rows:
        lines.append(f"## {r.scheme}/{r.gv_mode}")
        lines.extend(f"{th:.6g}\t{tpr:.6f}\t{fpr:.6f}" for th, tpr, fpr in r.roc)
    lines.append("")
    lines.append("# timing medians [s]")
    for r in rows:
        lines.append(f"{r.scheme}/{r.gv_mode}\t" + "\t".join(f"{k}={v:.6f}" for k, v in r.timing.items()))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    state = _load_engine(args.engine)
    gt = read_ground_truth(args.gt)
    paths = _descriptor_paths(args.queries)
    if not paths:
        raise CliError(f"no .bfds files in {args.queries}")
    queries, relevant = [], []
    for p in paths:
        key = str(p.resolve())
        if key not in gt:
            raise UsageError(f"missing ground truth for query {p}")
        rel = gt[key]
        if rel is not None and not 0 <= rel < state.index.n_images:
            raise UsageError(f"ground truth for {p} names image {rel}, but the index has {state.index.n_images}")
        queries.append(read_descriptor_file(p, state.n_bits)[0])
        relevant.append(rel)
    schemes = [s.strip() for s in args.scoring.split(",") if s.strip()]
    for s in schemes:
        if s not in SCHEMES:
            raise UsageError(f"unknown scoring scheme {s!r}; choose from {', '.join(SCHEMES)}")
    gv = _gv_config(args)
    rows = []
    for s in schemes:
        log.info("evaluating scheme %s with gv=%s on %d queries", s, args.gv, len(queries))
        rows.append(evaluate(state, queries, relevant, ScoringConfig(s, args.k, args.sigma), gv, args.gv))
    report = _format_report(rows)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report)
    summary_path = Path(str(out) + ".summary")
    summary_lines = []
    for r in rows:
        for k, v in r.summary().items():
            summary_lines.append(f"{r.scheme}.{r.gv_mode}.{k}={v}")
    summary_path.write_text("\n".join(summary_lines) + "\n")
    sys.stdout.write(report.split("\n\n")[0] + "\n")
    print(f"report: {out}\nsummary: {summary_path}")
    return 0


# -- argument parsing ------------------------------------------------------

def _add_scoring_flags(p, multi=False):
    p.add_argument("--scoring", default="lnm", choices=None if multi else SCHEMES,
                   help="vote rule" + (" (comma-separated list allowed)" if multi else ""))
    p.add_argument("--k", type=int, default=2, help="neighbours per query feature")
    p.add_argument("--sigma", type=float, default=9.0, help="Gaussian width for --scoring gw")
    p.add_argument("--top-r", type=int, default=3, help="candidates passed to verification")
    p.add_argument("--gv", choices=["off", "on", "cc"], default="cc",
                   help="geometric verification: off, on, or on with convexity check")
    p.add_argument("--min-inliers", type=int, default=GVConfig.min_inliers)
    p.add_argument("--inlier-px", type=float, default=GVConfig.inlier_px)
    p.add_argument("--dedup-px", type=float, default=GVConfig.dedup_px)
    p.add_argument("--gv-iterations", type=int, default=GVConfig.max_iterations)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bvsearch", description="Visual search over binary local descriptors.")
    parser.add_argument("--config", help="key=value file; flags given on the command line win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--features", type=int, default=900)
    p.add_argument("--noise", type=float, default=0.1, help="bit-flip probability")
    p.add_argument("--jitter", choices=["auto", "none", "default"], default="auto",
                   help="homography jitter; auto means none when --noise is 0")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--queries", type=int, default=None, help="true queries (default: one per image)")
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--training", type=int, default=20000, help="training descriptors")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train visual words and the substring dictionary")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--words", type=int, default=1024)
    p.add_argument("--substring-bits", type=int, default=64)
    p.add_argument("--th-init", type=float, default=0.25)
    p.add_argument("--th-step", type=float, default=0.05)
    p.add_argument("--max-iter", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="index reference images (sorted filename order)")
    p.add_argument("--engine", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="search one query file")
    p.add_argument("--engine", required=True)
    p.add_argument("--query", required=True)
    _add_scoring_flags(p)
    p.add_argument("--top", type=int, default=10, help="ranked results to print")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate a query directory against ground truth")
    p.add_argument("--engine", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    _add_scoring_flags(p, multi=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _read_config(path: str) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?", choices=None)
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config and known.command in subparsers:
        config = _read_config(known.config)
        sub = subparsers[known.command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in config.items():
            if key not in actions:
                parser.error(f"unknown key {key!r} in {known.config} for command {known.command}")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[key] = action.type(value) if action.type else value
                except ValueError:
                    parser.error(f"invalid value {value!r} for {key!r} in {known.config}")
            if action.choices is not None and defaults[key] not in action.choices:
                parser.error(f"{key} must be one of {', '.join(map(str, action.choices))} in {known.config}")
            action.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    _validate(parser, args)
    return args


def _validate(parser, args) -> None:
    if args.command in ("search", "eval"):
        _check_positive(parser, args, "k", "sigma", "top_r", "inlier_px", "dedup_px", "gv_iterations")
        if args.min_inliers < 0:
            parser.error(f"--min-inliers must be non-negative, got {args.min_inliers}")
    if args.command == "search":
        _check_positive(parser, args, "top")
    if args.command == "train":
        _check_positive(parser, args, "max_iter", "th_step")
        if args.words < 2:
            parser.error(f"--words must be at least 2, got {args.words}")
        if not 0 < args.th_init <= 1:
            parser.error(f"--th-init must lie in (0, 1], got {args.th_init}")
    if args.command == "synth":
        _check_positive(parser, args, "images", "features")
        for name in ("noise", "dropout"):
            if not 0 <= getattr(args, name) <= 1:
                parser.error(f"--{name} must lie in [0, 1]")
        if args.distractors < 0 or args.training < 0 or (args.queries is not None and args.queries < 0):
            parser.error("counts must be non-negative")


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"bvsearch: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, UsageError, ConfigurationError, FormatError, OSError) as exc:
        print(f"bvsearch: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
