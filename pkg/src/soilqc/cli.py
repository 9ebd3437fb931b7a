"""Command-line pipelines wiring the modules together.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every command taking a seed (directly or through its config) is
bit-reproducible; output files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import tempfile
from typing import Optional, Sequence

from soilqc.config import Config, load_config
from soilqc.errors import DataError, NumericError
from soilqc.evaluation import (
    ConfusionMatrix,
    SiteReport,
    benchmark,
    confusion,
    render_matrix,
    stratify_by_anomaly_fraction,
    take_observations,
)
from soilqc.model import (
    config_hash,
    featurize,
    init_model,
    load_model,
    predict_series,
    save_model,
)
from soilqc.rules import flags_to_binary, run_rules
from soilqc.series import (
    SensorSeries,
    format_timestamp,
    ingest_csv,
    split_sites,
    write_csv,
)
from soilqc.synth import generate_corpus
from soilqc.training import train, write_history_csv


def _atomic_text(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config_with_seed(path: Optional[str], seed: Optional[int]) -> Config:
    cfg = load_config(path)
    if seed is not None:
        cfg = Config(
            rules=cfg.rules,
            train=dataclasses.replace(cfg.train, seed=seed),
            synth=dataclasses.replace(cfg.synth, seed=seed),
            model=cfg.model,
        )
    return cfg


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config_with_seed(args.config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    corpus, truths = generate_corpus(cfg.synth)
    write_csv(os.path.join(args.out, "corpus.csv"), corpus)

    rows = ["site_id,depth_cm,n_samples,n_present,n_anomalous,"
            "spike,break,constant,out_of_range,target_fraction,realized_fraction"]
    for t in truths:
        rows.append(
            f"{t.site_id},{t.depth_cm:g},{t.n_samples},{t.n_present},{t.n_anomalous},"
            f"{t.counts['spike']},{t.counts['break']},{t.counts['constant']},"
            f"{t.counts['out_of_range']},{t.target_fraction!r},{t.realized_fraction!r}"
        )
    _atomic_text(os.path.join(args.out, "truth.csv"), "\n".join(rows) + "\n")
    print(f"wrote {len(corpus)} series to {args.out}")
    return 0


def cmd_flag(args: argparse.Namespace) -> int:
    cfg = _load_config_with_seed(args.config, None)
    corpus = ingest_csv(args.in_csv)
    flags = {(s.site_id, s.depth_cm): run_rules(s, cfg.rules) for s in corpus}
    write_csv(args.out, corpus, flags=flags)
    print(f"flagged {sum(len(s) for s in corpus)} readings -> {args.out}")
    return 0


def _train_val_split(corpus: list[SensorSeries], seed: int):
    sites = {s.site_id for s in corpus}
    if len(sites) < 3:
        return corpus, []  # too few sites to hold out validation data
    train_set, val_set, _test = split_sites(corpus, (0.8, 0.1, 0.1), seed)
    return train_set, val_set


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config_with_seed(args.config, args.seed)
    corpus = ingest_csv(args.in_csv)
    train_series, val_series = _train_val_split(corpus, cfg.train.seed)

    train_samples = [w for s in train_series for w in featurize(s)]
    val_samples = [w for s in val_series for w in featurize(s)]

    model = init_model(cfg.train.seed, cfg.model.embed_dim, cfg.model.hidden_dim)
    model, history = train(model, train_samples, val_samples, cfg.train)
    model.metadata.update(
        {
            "seed": cfg.train.seed,
            "epochs": cfg.train.epochs,
            "config_hash": config_hash(dataclasses.asdict(cfg.train)),
        }
    )
    save_model(model, args.model_out)
    history_path = args.history_out or args.model_out + ".history.csv"
    write_history_csv(history, history_path)
    best = model.metadata["best_epoch"]
    print(f"trained {history[-1].epoch} epochs (best {best}) -> {args.model_out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    corpus = ingest_csv(args.in_csv)
    probs = {}
    preds = {}
    for series in corpus:
        p, b = predict_series(model, series, threshold=args.threshold)
        key = (series.site_id, series.depth_cm)
        probs[key] = p
        preds[key] = b
    write_csv(args.out, corpus, probabilities=probs, predictions=preds)
    print(f"scored {sum(len(s) for s in corpus)} readings -> {args.out}")
    return 0


def _read_predictions(path: str) -> dict[tuple[str, float, str], Optional[bool]]:
    """Per-reading binary calls from a flagged or scored CSV.

    Uses the qflag column when present (any code besides G = anomaly, M =
    unscorable), otherwise the anomaly_pred column.
    """
    out: dict[tuple[str, float, str], Optional[bool]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "qflag" in fields:
            mode = "qflag"
        elif "anomaly_pred" in fields:
            mode = "anomaly_pred"
        else:
            raise DataError(f"{path}: need a qflag or anomaly_pred column to evaluate")
        for row in reader:
            key = (row["site_id"], float(row["depth_cm"]), row["timestamp"])
            cell = row[mode]
            if mode == "qflag":
                codes = set(cell.split(";")) if cell else set()
                if "M" in codes or not codes:
                    out[key] = None
                else:
                    out[key] = bool(codes - {"G"})
            else:
                out[key] = None if cell == "" else cell == "1"
    return out


def _site_reports(
    corpus: Sequence[SensorSeries],
    predictions: dict[tuple[str, float, str], Optional[bool]],
) -> tuple[list[SiteReport], ConfusionMatrix, int]:
    by_site: dict[str, tuple[list, list]] = {}
    for series in corpus:
        refs, preds = by_site.setdefault(series.site_id, ([], []))
        for reading in series.readings:
            refs.append(reading.manual_flag)
            key = (series.site_id, f"{series.depth_cm:g}", format_timestamp(reading.timestamp))
            preds.append(predictions.get((key[0], float(key[1]), key[2])))

    reports = []
    total = ConfusionMatrix()
    excluded = 0
    for site_id in sorted(by_site):
        refs, preds = by_site[site_id]
        matrix = confusion(refs, preds)
        reports.append(
            SiteReport(site_id=site_id, matrix=matrix, excluded=len(refs) - matrix.total)
        )
        total = total + matrix
        excluded += len(refs) - matrix.total
    return reports, total, excluded


def _report_csv(reports: Sequence[SiteReport]) -> str:
    rows = ["site_id,anomaly_fraction,tn,fp,fn,tp,excluded,correct_flagged_pct,anomaly_flagged_pct"]
    for r in reports:
        m = r.matrix
        rows.append(
            f"{r.site_id},{r.anomaly_fraction!r},{m.tn},{m.fp},{m.fn},{m.tp},"
            f"{r.excluded},{r.correct_flagged_pct:.2f},{r.anomaly_flagged_pct:.2f}"
        )
    return "\n".join(rows) + "\n"


def cmd_evaluate(args: argparse.Namespace) -> int:
    corpus = ingest_csv(args.reference)
    predictions = _read_predictions(args.predicted)
    reports, total, excluded = _site_reports(corpus, predictions)

    text = render_matrix(total, excluded=excluded, title="Flagging performance vs manual labels")
    strat = stratify_by_anomaly_fraction(reports, cutoff=args.cutoff)
    text += (
        f"\n\nSites with anomaly fraction <= {args.cutoff:g}: {len(strat.low)}"
        f" (recall {strat.low_total.anomaly_recall_pct:.2f}%)"
        f"\nSites with anomaly fraction  > {args.cutoff:g}: {len(strat.high)}"
        f" (recall {strat.high_total.anomaly_recall_pct:.2f}%)\n"
    )
    _atomic_text(args.out, text)
    _atomic_text(args.out + ".sites.csv", _report_csv(reports))
    print(text)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load_config_with_seed(args.config, None)
    model = load_model(args.model)
    corpus = ingest_csv(args.in_csv)
    os.makedirs(args.out, exist_ok=True)

    rule_preds: dict[tuple[str, float, str], Optional[bool]] = {}
    model_preds: dict[tuple[str, float, str], Optional[bool]] = {}
    for series in corpus:
        key_base = (series.site_id, series.depth_cm)
        rule_binary = flags_to_binary(run_rules(series, cfg.rules))
        _, model_binary = predict_series(model, series, threshold=cfg.model.threshold)
        for reading, rb, mb in zip(series.readings, rule_binary, model_binary):
            key = (key_base[0], key_base[1], format_timestamp(reading.timestamp))
            rule_preds[key] = rb
            model_preds[key] = mb

    rule_reports, rule_total, rule_excl = _site_reports(corpus, rule_preds)
    model_reports, model_total, model_excl = _site_reports(corpus, model_preds)

    text = render_matrix(rule_total, excluded=rule_excl, title="Rule engine vs manual labels")
    text += "\n\n"
    text += render_matrix(model_total, excluded=model_excl, title="Sequence model vs manual labels")

    strat_rule = stratify_by_anomaly_fraction(rule_reports, cutoff=args.cutoff)
    strat_model = stratify_by_anomaly_fraction(model_reports, cutoff=args.cutoff)
    text += (
        f"\n\nRecall by site contamination (cutoff {args.cutoff:g}):"
        f"\n  rules : low {strat_rule.low_total.anomaly_recall_pct:.2f}%"
        f"  high {strat_rule.high_total.anomaly_recall_pct:.2f}%"
        f"\n  model : low {strat_model.low_total.anomaly_recall_pct:.2f}%"
        f"  high {strat_model.high_total.anomaly_recall_pct:.2f}%\n"
    )

    n_obs = min(sum(len(s) for s in corpus), args.benchmark_obs)
    bench_corpus = take_observations(corpus, n_obs)
    rule_bench = benchmark(
        lambda: [run_rules(s, cfg.rules) for s in bench_corpus], observations=n_obs
    )
    model_bench = benchmark(
        lambda: [predict_series(model, s, threshold=cfg.model.threshold) for s in bench_corpus],
        observations=n_obs,
    )
    text += (
        f"\nThroughput over {n_obs} observations (median of 3 runs):"
        f"\n  rules : {rule_bench.seconds:.2f} s"
        f" ({rule_bench.observations_per_second:,.0f} obs/s)"
        f"\n  model : {model_bench.seconds:.2f} s"
        f" ({model_bench.observations_per_second:,.0f} obs/s)\n"
    )

    _atomic_text(os.path.join(args.out, "report.txt"), text)
    side = ["site_id,anomaly_fraction,recall_rule,recall_model"]
    model_by_site = {r.site_id: r for r in model_reports}
    for r in rule_reports:
        mr = model_by_site[r.site_id]
        side.append(
            f"{r.site_id},{r.anomaly_fraction!r},{r.matrix.recall!r},{mr.matrix.recall!r}"
        )
    _atomic_text(os.path.join(args.out, "sites.csv"), "\n".join(side) + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soilqc",
        description="Quality control for soil moisture sensor time series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--config", help="config file path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flag", help="run the rule engine, adding a qflag column")
    p.add_argument("--in", dest="in_csv", required=True, help="input corpus CSV")
    p.add_argument("--config", help="config file path")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_flag)

    p = sub.add_parser("train", help="train the sequence model on labeled data")
    p.add_argument("--in", dest="in_csv", required=True, help="labeled corpus CSV")
    p.add_argument("--config", help="config file path")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--model-out", required=True, help="model file path")
    p.add_argument("--history-out", help="training history CSV (default: <model>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score readings with a trained model")
    p.add_argument("--in", dest="in_csv", required=True, help="input corpus CSV")
    p.add_argument("--model", required=True, help="model file path")
    p.add_argument("--threshold", type=float, default=0.5, help="anomaly threshold (default 0.5)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against manual labels")
    p.add_argument("--reference", required=True, help="CSV with manual_flag labels")
    p.add_argument("--predicted", required=True, help="CSV with qflag or anomaly_pred")
    p.add_argument("--cutoff", type=float, default=0.30, help="site stratification cutoff")
    p.add_argument("--out", required=True, help="report text path (CSV written alongside)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="side-by-side rules vs model with benchmark")
    p.add_argument("--in", dest="in_csv", required=True, help="labeled corpus CSV")
    p.add_argument("--config", help="config file path")
    p.add_argument("--model", required=True, help="model file path")
    p.add_argument("--cutoff", type=float, default=0.30, help="site stratification cutoff")
    p.add_argument("--benchmark-obs", type=int, default=150000,
                   help="observation count for the throughput benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data-error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric-error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
