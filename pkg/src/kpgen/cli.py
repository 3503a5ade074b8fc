"""Command-line entry point: synth-data, train, generate, evaluate, sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or
numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from .config import RunConfig
from .corpus import RESERVED, linearize, read_jsonl, synth_corpus, tokenize
from .decode import decode_all
from .errors import CheckpointError, ConfigError, DataError, KpgenError, NumericError
from .metrics import METRIC_NAMES, HashingEmbedder, TokenMeanEmbedder, evaluate
from .trainer import Checkpoint, load_checkpoint, train

log = logging.getLogger("kpgen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


# pipeline helpers ------------------------------------------------------------

def load_config(path: str | None, overrides: list[str] | None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


def model_embedder(ckpt: Checkpoint) -> TokenMeanEmbedder:
    table = ckpt.params["tgt_emb"]
    return TokenMeanEmbedder({tok: table[i] for i, tok in enumerate(ckpt.tgt_vocab) if tok not in RESERVED},
                             dim=table.shape[1])


def resolve_embedder(choice: str | None, ckpt: Checkpoint | None):
    if choice in (None, "model"):
        return model_embedder(ckpt) if ckpt is not None else HashingEmbedder()
    if choice == "hash":
        return HashingEmbedder()
    return TokenMeanEmbedder.from_file(choice)


def generate_file(ckpt: Checkpoint, input_path: str, out_path: str, max_len: int | None = None) -> int:
    examples = read_jsonl(input_path)
    src_vocab, tgt_vocab = ckpt.vocabs()
    cfg = ckpt.run_config
    max_len = max_len or cfg.train.max_decode_len
    lins = [linearize(ex, src_vocab, tgt_vocab, cfg.corpus.max_src_len, require_keyphrases=False)
            for ex in examples]
    preds = decode_all(ckpt.params, lins, tgt_vocab, max_len)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for p in preds:
            fh.write(json.dumps({"keyphrases": [" ".join(k) for k in p.keyphrases], "raw": p.raw},
                                ensure_ascii=False) + "\n")
    return len(preds)


def read_keyphrase_file(path: str) -> list[list[tuple[str, ...]]]:
    """Keyphrase lists from any JSONL file whose records carry ``keyphrases``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                kps = json.loads(line)["keyphrases"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: no keyphrases field") from exc
            out.append([t for t in (tuple(tokenize(k)) for k in kps) if t])
    return out


def evaluate_files(pred_path: str, gold_path: str, embedder=None) -> dict:
    preds, golds = read_keyphrase_file(pred_path), read_keyphrase_file(gold_path)
    if len(preds) != len(golds):
        raise DataError(f"{pred_path} has {len(preds)} records but {gold_path} has {len(golds)}")
    return evaluate(preds, golds, embedder).to_json()


def write_report(report: dict, path: str, csv_path: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_NAMES)
            writer.writerow([repr(report["means"][m]) for m in METRIC_NAMES])


def run_point(cfg_dict: dict, data_dir: str, out_dir: str) -> dict:
    """Train, generate on the test split and evaluate one configuration."""
    cfg = RunConfig.from_dict(cfg_dict)
    cfg.train.data_dir, cfg.train.out_dir = data_dir, out_dir
    result = train(cfg)
    ckpt = result.checkpoint
    eval_path = os.path.join(data_dir, "test.jsonl")
    if not os.path.exists(eval_path):
        eval_path = os.path.join(data_dir, "valid.jsonl")
    pred_path = os.path.join(out_dir, "predictions.jsonl")
    generate_file(ckpt, eval_path, pred_path)
    report = evaluate_files(pred_path, eval_path, resolve_embedder(cfg.metrics.embedder, ckpt))
    write_report(report, os.path.join(out_dir, "report.json"))
    return report["means"]


def _fmt_lambda(lam: float) -> str:
    return f"{lam:g}"


def sweep(cfg: RunConfig, lambdas: list[float], data_dir: str, out_dir: str,
          seeds: list[int] | None = None, jobs: int = 1) -> list[dict]:
    """One training run per (lambda, seed) with lambda_t = lambda_c = lambda.

    Writes ``sweep.csv`` (one row per lambda, medians over seeds) and
    ``sweep_runs.csv`` (one row per run). Failed runs are reported and skipped.
    """
    if not lambdas:
        raise ConfigError("lambda list is empty")
    seeds = seeds or [cfg.train.seed]
    os.makedirs(out_dir, exist_ok=True)
    points = []
    for lam in lambdas:
        for seed in seeds:
            d = cfg.to_dict()
            d["loss"]["lambda_t"] = d["loss"]["lambda_c"] = float(lam)
            d["train"]["seed"] = seed
            sub = os.path.join(out_dir, f"lambda_{_fmt_lambda(lam)}", f"seed_{seed}")
            points.append((lam, seed, d, sub))
    results: dict[tuple, dict | Exception] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {(lam, seed): pool.submit(run_point, d, data_dir, sub) for lam, seed, d, sub in points}
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as exc:  # reported per point, sweep continues
                    results[key] = exc
    else:
        for lam, seed, d, sub in points:
            try:
                results[(lam, seed)] = run_point(d, data_dir, sub)
            except Exception as exc:
                results[(lam, seed)] = exc
    runs, rows = [], []
    for lam, seed, _, _ in points:
        res = results[(lam, seed)]
        if isinstance(res, Exception):
            print(f"sweep: lambda={_fmt_lambda(lam)} seed={seed} failed: {res}", file=sys.stderr)
            runs.append({"lambda": lam, "seed": seed, "status": f"failed: {res}"})
            continue
        runs.append({"lambda": lam, "seed": seed, "status": "ok", "f1_at_m": res["f1_at_m"],
                     "unique_kp_pct": 100 - res["dup_kp_pct"], **{m: res[m] for m in METRIC_NAMES if m != "f1_at_m"}})
    for lam in lambdas:
        ok = [r for r in runs if r["lambda"] == lam and r["status"] == "ok"]
        if not ok:
            rows.append({"lambda": lam, "n_runs": 0, "f1_at_m": "", "unique_kp_pct": ""})
            continue
        rows.append({"lambda": lam, "n_runs": len(ok),
                     "f1_at_m": statistics.median(r["f1_at_m"] for r in ok),
                     "unique_kp_pct": statistics.median(r["unique_kp_pct"] for r in ok),
                     "self_bleu": statistics.median(r["self_bleu"] for r in ok)})
    _write_csv(os.path.join(out_dir, "sweep.csv"), rows,
               ["lambda", "n_runs", "f1_at_m", "unique_kp_pct", "self_bleu"])
    _write_csv(os.path.join(out_dir, "sweep_runs.csv"), runs,
               ["lambda", "seed", "status", "f1_at_m", "unique_kp_pct"] + [m for m in METRIC_NAMES if m != "f1_at_m"])
    return rows


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# commands ----------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = load_config(args.config, args.set)
    synth_corpus(cfg.corpus, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    cfg.train.data_dir, cfg.train.out_dir = args.data, args.out
    resume = load_checkpoint(args.resume) if args.resume else None

    def show(event):
        if event["event"] in ("eval", "early_stop", "end"):
            log.info(json.dumps(event, sort_keys=True))

    result = train(cfg, resume=resume, log_fn=show)
    print(f"best valid F1@M {result.checkpoint.best_f1:.4f}; checkpoint {os.path.join(args.out, 'model.ckpt')}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    n = generate_file(ckpt, args.input, args.out, args.max_len)
    print(f"wrote {n} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    embedder = resolve_embedder(args.embeddings, ckpt)
    report = evaluate_files(args.pred, args.gold, embedder)
    write_report(report, args.report, args.csv)
    print(json.dumps(report["means"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
        seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else None
    except ValueError as exc:
        raise ConfigError(f"bad lambda/seed list: {exc}") from exc
    rows = sweep(cfg, lambdas, args.data, args.out, seeds, args.jobs)
    for r in rows:
        print(r)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one scalar config field; repeatable")

    p = sub.add_parser("synth-data", help="write a synthetic train/valid/test corpus")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    with_config(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl and valid.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from (config must match)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy-decode keyphrases for a JSONL file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="quality and diversity metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", help="also write a one-row CSV summary")
    p.add_argument("--ckpt", help="use this model's target embeddings for emb_sim")
    p.add_argument("--embeddings", help="'hash', 'model', or a 'token v1 ... vd' vector file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train/evaluate over unlikelihood weights")
    with_config(p)
    p.add_argument("--lambdas", required=True, help="comma-separated, e.g. 0,5,15,50")
    p.add_argument("--seeds", help="comma-separated training seeds (default: config seed)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="run points in parallel processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, KpgenError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
