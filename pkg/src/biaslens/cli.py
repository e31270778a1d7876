"""``biaslens`` command line: sample, label, check reliability, fit, report, simulate.

Exit status is 0 on success, 1 for usage or validation errors and 2 for
runtime failures (provider, numerical, I/O).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .glmm import FitError, FitOptions, build_design, fit
from .labeling import (LabelError, MergePolicy, merged_dataset, read_labels,
                       sample_for_double_coding, write_labels)
from .report import (fit_document, load_fit_json, reliability_section, write_fit_json,
                     write_report)
from .sampler import (OpenAICompletionsProvider, ProviderError, ResponseStore,
                      collect_study, read_responses)
from .study_config import ConfigError, StudyConfig, get_builtin_study, load_study_config
from .synth import load_scenario, monte_carlo_recovery, power_curve, write_power_csv

log = logging.getLogger("biaslens")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_study(p):
    p.add_argument("--study", help="built-in study id (abortion, catalan)")
    p.add_argument("--config", type=Path, help="study config JSON (overrides --study)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biaslens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", help="collect completions into <study>.responses.jsonl")
    _add_study(p)
    p.add_argument("--endpoint", required=True, help="OpenAI-compatible base URL")
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("label-template", help="blank label CSV plus double-coding subset")
    _add_study(p)
    p.add_argument("--responses", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--coders", default="coder1,coder2",
                   help="primary and second coder ids, comma separated")

    p = sub.add_parser("reliability", help="print Holsti agreement tables")
    p.add_argument("--labels", type=Path, nargs="+", required=True)
    p.add_argument("--responses", type=Path, required=True)
    p.add_argument("--coders", help="the two coder ids to compare, comma separated")

    p = sub.add_parser("fit", help="fit the multilevel model and write <study>.fit.json")
    _add_study(p)
    p.add_argument("--labels", type=Path, nargs="+", required=True)
    p.add_argument("--responses", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--reference", help="reference language (default from the config)")
    p.add_argument("--primary-coder", help="coder whose labels become the outcome")
    p.add_argument("--coders", help="coder pair for the reliability section")

    p = sub.add_parser("report", help="render <study>.report.md and figure data")
    _add_study(p)
    p.add_argument("--fit", type=Path, help="fit JSON (default <out>/<study>.fit.json)")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--no-svg", action="store_true")

    p = sub.add_parser("simulate", help="Monte Carlo recovery or power study")
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--deltas", help="comma-separated probability shifts: run a power curve")
    p.add_argument("--contrast", help="LANG_A,LANG_B for the power curve "
                                     "(default: reference vs first other language)")
    return parser


def _study(args) -> StudyConfig:
    if args.config is not None:
        return load_study_config(args.config)
    if args.study:
        return get_builtin_study(args.study)
    raise UsageError("one of --study or --config is required")


def _split(value, n, flag):
    parts = [s.strip() for s in value.split(",")]
    if len(parts) != n or not all(parts):
        raise UsageError(f"{flag} expects {n} comma-separated values")
    return parts


def _read_all_labels(paths):
    out = []
    for p in paths:
        out.extend(read_labels(p))
    return out


def cmd_sample(args):
    config = _study(args)
    store = ResponseStore.for_study(args.out, config.study_id)
    provider = OpenAICompletionsProvider(args.endpoint)
    counts = collect_study(provider, config, store)
    for (lang, model), n in counts.items():
        print(f"{lang}\t{model}\t+{n}")
    print(f"{len(store)} records in {store.path}")


def cmd_label_template(args):
    config = _study(args)
    primary, second = _split(args.coders, 2, "--coders")
    responses = [r for r in read_responses(args.responses) if r.study_id == config.study_id]
    if not responses:
        raise ConfigError(f"{args.responses}: no responses for study {config.study_id!r}")
    args.out.mkdir(parents=True, exist_ok=True)
    main_path = args.out / f"{config.study_id}.labels.csv"
    dc_path = args.out / f"{config.study_id}.double_coding.csv"
    write_labels(main_path, [(r.record_id, primary, None) for r in responses])
    subset = sample_for_double_coding(responses, args.fraction, args.seed)
    write_labels(dc_path, [(rid, second, None) for rid in subset])
    print(f"{len(responses)} rows -> {main_path}")
    print(f"{len(subset)} rows -> {dc_path}")


def cmd_reliability(args):
    labels = _read_all_labels(args.labels)
    responses = read_responses(args.responses)
    coders = tuple(_split(args.coders, 2, "--coders")) if args.coders else None
    rel = reliability_section(labels, responses, coders)
    if rel is None:
        raise LabelError("reliability needs labels from at least two coders")
    print(f"coders\t{rel['coder_a']}\t{rel['coder_b']}")
    print(f"overall\t{rel['n_shared']}\t{rel['holsti']:.4f}")
    print("language\tmodel\tn_shared\tholsti")
    for c in rel["cells"]:
        print(f"{c['language']}\t{c['model']}\t{c['n_shared']}\t{c['holsti']:.4f}")


def cmd_fit(args):
    config = _study(args)
    labels = _read_all_labels(args.labels)
    responses = [r for r in read_responses(args.responses) if r.study_id == config.study_id]
    if not responses:
        raise ConfigError(f"{args.responses}: no responses for study {config.study_id!r}")
    rows = merged_dataset(responses, labels, MergePolicy(primary_coder=args.primary_coder))
    reference = args.reference or config.reference_language
    if reference not in config.language_codes:
        raise ConfigError(f"--reference {reference!r} is not a study language")
    design = build_design(rows, reference, config.language_codes, config.models)
    result = fit(design, FitOptions())
    coders = tuple(_split(args.coders, 2, "--coders")) if args.coders else None
    rel = reliability_section(labels, responses, coders)
    doc = fit_document(result, config, rows, reliability=rel)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{config.study_id}.fit.json"
    write_fit_json(path, doc)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(doc['cells'])} cells, loglik {result.loglik:.3f} -> {path}")


def cmd_report(args):
    if args.fit is not None:
        path = args.fit
    else:
        study_id = _study(args).study_id
        path = args.out / f"{study_id}.fit.json"
    doc = load_fit_json(path)
    paths = write_report(doc, args.out, svg=not args.no_svg)
    for p in paths.values():
        print(p)


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.scenario.stem
    if args.deltas:
        try:
            deltas = [float(s) for s in args.deltas.split(",")]
        except ValueError:
            raise UsageError("--deltas expects comma-separated numbers") from None
        if args.contrast:
            lang_a, lang_b = _split(args.contrast, 2, "--contrast")
        else:
            lang_a = scenario.reference_language
            lang_b = next(lang for lang in scenario.languages if lang != lang_a)
        for lang in (lang_a, lang_b):
            if lang not in scenario.languages:
                raise ConfigError(f"--contrast language {lang!r} not in scenario")
        points = power_curve(scenario, deltas, args.reps, args.seed, lang_a, lang_b)
        path = args.out / f"{stem}.power.csv"
        write_power_csv(path, points)
        for pt in points:
            print(f"delta {pt.delta:+.3f}\tdetection {pt.detection_rate:.3f}")
    else:
        rep = monte_carlo_recovery(scenario, args.reps, args.seed)
        path = args.out / f"{stem}.recovery.csv"
        rep.write_csv(path)
        for c in rep.cells:
            print(f"{c.language}\t{c.model}\ttruth {c.truth:.4f}\tmean {c.mean_estimate:.4f}"
                  f"\tcoverage {c.coverage:.3f}")
    print(path)


COMMANDS = {"sample": cmd_sample, "label-template": cmd_label_template,
            "reliability": cmd_reliability, "fit": cmd_fit, "report": cmd_report,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"biaslens: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, LabelError, FitError, KeyError, FileNotFoundError) as exc:
        print(f"biaslens: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"biaslens: {exc}", file=sys.stderr)
        return 1
    except (ProviderError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"biaslens: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
