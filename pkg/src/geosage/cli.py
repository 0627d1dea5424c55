"""Command-line entry point: ingest, train, evaluate, recommend, synth, inspect.

Exit status: 0 success, 1 usage error, 2 data error, 3 internal error.
Errors go to stderr as ``geosage-error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation, inference, model, synth
from .errors import DataError, DictMismatch, EmptyCorpus, GeoSageError
from .geo import USA_BBOX, BoundingBox, GeoPoint, PyramidConfig
from .recsys import DEFAULT_RADIUS_KM, Query, Recommender

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
ERROR_PREFIX = "geosage-error"

log = logging.getLogger("geosage")


class UsageError(Exception):
    pass


def _checked(factory, *args, **kw):
    """Build a config object, reporting invalid values as usage errors."""
    try:
        return factory(*args, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _point(text: str) -> GeoPoint:
    try:
        lat, lon = (float(t) for t in text.split(","))
        return GeoPoint(lat, lon)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected lat,lon: {e}") from None


def _bbox(text: str) -> BoundingBox:
    try:
        vals = [float(t) for t in text.split(",")]
        if len(vals) != 4:
            raise ValueError("need 4 numbers")
        return BoundingBox.from_bounds(*vals)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected min_lat,min_lon,max_lat,max_lon: {e}") from None


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("every k must be >= 1")
    return ks


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return v


def _write_text(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- commands -----------------------------------------------------------------

def cmd_ingest(args) -> int:
    pyramid = _checked(PyramidConfig, args.bbox, args.height)
    if not 0.0 < args.split_fraction < 1.0:
        raise UsageError("--split-fraction must be in (0, 1)")
    stream = sys.stdin if args.checkins == "-" else open(args.checkins, encoding="utf-8")
    with stream:
        parsed = corpus_mod.parse_checkins(stream, args.max_malformed_fraction)
    homes = {}
    if args.homes:
        with open(args.homes, encoding="utf-8") as f:
            homes = corpus_mod.parse_homes(f)
    corp, report = corpus_mod.build_corpus(parsed.records, pyramid, homes, args.d_km)
    report.n_lines = parsed.n_lines
    report.malformed = len(parsed.malformed)
    if not corp.activities:
        raise EmptyCorpus("no usable check-ins")
    corp.split = corpus_mod.split(corp.activities, args.split_fraction, args.seed)
    corpus_mod.save_corpus(corp, args.out)
    summary = asdict(report) | {"users": len(corp.dictionaries.users),
                                "items": len(corp.dictionaries.items),
                                "words": len(corp.dictionaries.vocab),
                                "train": len(corp.split.train),
                                "test_home": len(corp.split.test_home),
                                "test_out": len(corp.split.test_out)}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    H = args.height
    config = _checked(model.ModelConfig, K=args.k, H=H or 1, variant=args.variant,
                      l1_weight=args.l1, seed=args.seed)
    opts = _checked(inference.TrainOptions, em_iters=args.em_iters,
                    gibbs_sweeps_per_e=args.gibbs_sweeps, mstep_iters=args.mstep_iters,
                    convergence_tol=args.tol, freeze_background=args.freeze_background)
    corp = corpus_mod.load_corpus(args.corpus)
    config = _checked(model.ModelConfig, config.K, H or corp.pyramid.height, config.variant,
                      config.l1_weight, corp.d_km, config.seed)
    trace_file = open(args.trace, "w", encoding="utf-8") if args.trace else None

    def on_iter(rec):
        d = rec.to_dict()
        if not args.trace_timings:
            d.pop("wall_time")
        if trace_file:
            trace_file.write(json.dumps(d, sort_keys=True) + "\n")
        log.info("iter %d objective %.6f", rec.iteration, rec.objective)

    try:
        result = inference.train(corp, config, opts, callback=on_iter)
    finally:
        if trace_file:
            trace_file.close()
    result.params.validate()
    model.save(result.params, args.out)
    print(json.dumps({"iterations": len(result.trace), "converged": result.converged,
                      "objective": result.trace[-1].objective if result.trace else None},
                     sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.baseline is None and args.model is None:
        raise UsageError("evaluate needs --model or --baseline")
    corp = corpus_mod.load_corpus(args.corpus)
    if args.baseline:
        report = evaluation.evaluate_baseline(
            args.baseline, corp, args.scenario, args.ks, args.cold_start_max,
            args.radius_km or DEFAULT_RADIUS_KM, args.seed, keep_ranks=bool(args.ranks_out))
    else:
        params = model.load(args.model)
        report = evaluation.evaluate(params, corp, args.scenario, args.ks, args.cold_start_max,
                                     args.radius_km, keep_ranks=bool(args.ranks_out),
                                     zoom_level=args.zoom)
    _write_text(args.out, report.to_lines())
    if args.ranks_out:
        Path(args.ranks_out).write_text("".join(f"{r}\n" for r in report.per_case_ranks))
    return EXIT_OK


def cmd_recommend(args) -> int:
    q = _checked(lambda: Query(args.user, GeoPoint(args.lat, args.lon), args.k,
                               args.radius_km, args.zoom, args.home))
    params = model.load(args.model)
    corp = corpus_mod.load_corpus(args.corpus)
    if args.zoom is not None and not 1 <= args.zoom <= params.config.H:
        raise UsageError(f"--zoom must be in [1, {params.config.H}]")
    rec = Recommender(params, corp)
    ranked = rec.recommend(q)
    names = corp.dictionaries.items
    out = [f"{i}\t{names.name(v)}\t{score:.12g}\n" for i, (v, score) in enumerate(ranked.entries, 1)]
    sys.stdout.write("".join(out))
    if args.explain and ranked.entries:
        top = ranked.entries[0][0]
        info = rec.explain(ranked, top)
        info["item"] = names.name(top)
        info["role"] = "tourist" if ranked.role == 1 else "local"
        info["user_known"] = ranked.user is not None
        print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = _checked(synth.SynthSpec, n_users=args.n_users, n_items=args.n_items,
                    vocab_size=args.vocab_size, K=args.k, H=args.height,
                    activities_per_user=args.activities_per_user,
                    tourist_fraction=args.tourist_fraction,
                    drift_strength=args.drift_strength, seed=args.seed)
    if not 0.0 < args.split_fraction < 1.0:
        raise UsageError("--split-fraction must be in (0, 1)")
    truth = synth.make_params(spec)
    corp = synth.sample_corpus(truth, spec)
    corp.split = corpus_mod.split(corp.activities, args.split_fraction, args.seed)
    corpus_mod.save_corpus(corp, args.out_corpus)
    model.save(truth, args.out_model)
    return EXIT_OK


def cmd_inspect(args) -> int:
    params = model.load(args.model)
    if not 0 <= args.topic < params.K:
        raise UsageError(f"--topic must be in [0, {params.K - 1}]")
    words = items = None
    if args.corpus:
        d = corpus_mod.load_corpus(args.corpus).dictionaries
        if d.dims[1:] != params.dims[1:]:
            raise DictMismatch("corpus dictionaries do not match the model")
        words, items = d.vocab, d.items

    def top(probs, lex):
        order = np.lexsort((np.arange(len(probs)), -probs))[:args.top]
        return [{"id": int(i), "name": lex.name(int(i)) if lex else None,
                 "p": float(f"{probs[i]:.12g}")} for i in order]

    out = {"topic": args.topic, "variant": params.config.variant,
           "words": top(model.beta(params, args.topic), words),
           "items": top(model.gamma(params, args.topic), items)}
    print(json.dumps(out, sort_keys=True, indent=1))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geosage", description="Geographical sparse additive generative model "
                "for spatial item recommendation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse check-ins into a split corpus bundle")
    s.add_argument("--checkins", required=True, help="tab-separated check-ins ('-' for stdin)")
    s.add_argument("--homes", help="optional 'user<TAB>lat,lon' file")
    s.add_argument("--bbox", type=_bbox, default=USA_BBOX, help="min_lat,min_lon,max_lat,max_lon")
    s.add_argument("--height", type=_positive(int), default=5)
    s.add_argument("--d-km", type=_positive(float), default=corpus_mod.DEFAULT_D_KM)
    s.add_argument("--split-fraction", type=float, default=corpus_mod.DEFAULT_SPLIT_FRACTION)
    s.add_argument("--max-malformed-fraction", type=_fraction,
                   default=corpus_mod.MAX_MALFORMED_FRACTION)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="fit a model by Gibbs-EM")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True, help="model file")
    s.add_argument("--trace", help="per-iteration JSON lines")
    s.add_argument("--trace-timings", action="store_true",
                   help="include wall-clock times in the trace (not reproducible)")
    s.add_argument("--k", type=_positive(int), default=50)
    s.add_argument("--height", type=_positive(int), help="pyramid height (default: corpus)")
    s.add_argument("--variant", choices=model.VARIANTS, default="full")
    s.add_argument("--l1", type=float, default=0.1)
    s.add_argument("--em-iters", type=_positive(int), default=200)
    s.add_argument("--mstep-iters", type=_positive(int), default=20)
    s.add_argument("--gibbs-sweeps", type=_positive(int), default=1)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--freeze-background", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="Recall@k on a hold-out scenario")
    s.add_argument("--corpus", required=True)
    s.add_argument("--model")
    s.add_argument("--baseline", choices=evaluation.BASELINES)
    s.add_argument("--scenario", choices=evaluation.SCENARIOS, required=True)
    s.add_argument("--ks", type=_ks, default=evaluation.DEFAULT_KS)
    s.add_argument("--cold-start-max", type=int)
    s.add_argument("--radius-km", type=_positive(float))
    s.add_argument("--zoom", type=_positive(int))
    s.add_argument("--seed", type=int, default=0, help="random baseline seed")
    s.add_argument("--out", help="report path (default stdout)")
    s.add_argument("--ranks-out", help="per-case rank dump")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("recommend", help="top-k items near a location")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--user", help="user id (unknown or absent: cold start)")
    s.add_argument("--lat", type=float, required=True)
    s.add_argument("--lon", type=float, required=True)
    s.add_argument("--home", type=_point, help="lat,lon overriding the stored home")
    s.add_argument("--k", type=_positive(int), default=10)
    s.add_argument("--radius-km", type=_positive(float), default=DEFAULT_RADIUS_KM)
    s.add_argument("--zoom", type=_positive(int))
    s.add_argument("--explain", action="store_true")
    s.set_defaults(func=cmd_recommend)

    s = sub.add_parser("synth", help="sample a corpus and its ground-truth model")
    d = synth.SynthSpec()
    s.add_argument("--n-users", type=_positive(int), default=d.n_users)
    s.add_argument("--n-items", type=_positive(int), default=d.n_items)
    s.add_argument("--vocab-size", type=_positive(int), default=d.vocab_size)
    s.add_argument("--k", type=_positive(int), default=d.K)
    s.add_argument("--height", type=_positive(int), default=d.H)
    s.add_argument("--activities-per-user", type=_positive(int), default=d.activities_per_user)
    s.add_argument("--tourist-fraction", type=_fraction, default=d.tourist_fraction)
    s.add_argument("--drift-strength", type=float, default=d.drift_strength)
    s.add_argument("--split-fraction", type=float, default=corpus_mod.DEFAULT_SPLIT_FRACTION)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-corpus", required=True)
    s.add_argument("--out-model", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("inspect", help="top words and items of one topic")
    s.add_argument("--model", required=True)
    s.add_argument("--topic", type=int, required=True)
    s.add_argument("--corpus", help="corpus bundle for readable names")
    s.add_argument("--top", type=_positive(int), default=10)
    s.set_defaults(func=cmd_inspect)
    return p


def _fail(kind: str, message, code: int) -> int:
    print(f"{ERROR_PREFIX}: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except (DataError, OSError, UnicodeDecodeError) as e:
        return _fail("data", e, EXIT_DATA)
    except GeoSageError as e:
        return _fail("internal", e, EXIT_INTERNAL)
    except Exception as e:  # invariant violations and bugs
        return _fail("internal", f"{type(e).__name__}: {e}", EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
