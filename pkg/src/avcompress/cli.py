"""Command-line entry point: ``avcompress <subcommand> [options]``.

Every subcommand resolves its configuration (file, then ``--set`` overrides,
then ``MMS_SEED``), creates a fresh output directory under ``paths.runs``
named by a hash of that configuration, and writes ``config.yaml`` there.
Re-running with ``--config <dir>/config.yaml`` repeats the run bit-exactly
into a sibling directory; earlier outputs are never touched.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import costing
from .avqformer import AllocationPolicy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_snr, save_config
from .decoder import Vocabulary
from .features import (
    ConfigurationError,
    CorpusStats,
    DataError,
    FormatError,
    NumericError,
    compute_rate_labels,
    corpus_stats,
    generate_corpus,
    load_corpus,
    read_manifest,
    sha256_of_tree,
)
from .pipeline import AVSRModel, RateSource, evaluate, train_pipeline
from .srp import SpeechRatePredictor, evaluate_srp, train_srp

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = (("train", 0.8), ("dev", 0.1), ("test", 0.1))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ----------------------------------------------------------------------------


def new_run_dir(cfg: RunConfig, kind: str) -> Path:
    root = Path(cfg.paths.runs)
    base = f"{kind}-{cfg.digest(kind)[:12]}"
    out = root / base
    i = 1
    while out.exists():
        out = root / f"{base}.{i}"
        i += 1
    out.mkdir(parents=True)
    return out


def split_counts(n: int) -> dict[str, int]:
    train = int(round(n * SPLITS[0][1]))
    dev = int(round(n * SPLITS[1][1]))
    return {"train": train, "dev": dev, "test": n - train - dev}


def _require_corpus(cfg: RunConfig, splits=("train", "dev")) -> Path:
    if not cfg.paths.corpus:
        raise DataError("no corpus given; run `avcompress gen-data` and pass --corpus <dir>")
    root = Path(cfg.paths.corpus)
    for s in splits:
        if not (root / f"{s}.jsonl").exists():
            raise DataError(f"corpus split {root / (s + '.jsonl')} is missing; run `avcompress gen-data` first")
    return root


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_table(stem: Path, header: list[str], rows: list[list]) -> None:
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    text = [[str(c) for c in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in text) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in text]
    stem.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def _fmt_snr(snr: float) -> str:
    return "inf" if math.isinf(snr) else f"{snr:g}"


def vocabulary(cfg: RunConfig) -> Vocabulary:
    return Vocabulary(cfg.synthesis().symbols())


def build_model(cfg: RunConfig) -> AVSRModel:
    rng = np.random.default_rng([cfg.seed, 0xA5])
    return AVSRModel(cfg.model_config(), vocabulary(cfg), rng).astype(np.float32)


def build_srp(cfg: RunConfig) -> SpeechRatePredictor:
    rng = np.random.default_rng([cfg.seed, 0x5B])
    return SpeechRatePredictor(cfg.features.feature_dim, cfg.srp_config(), rng).astype(np.float32)


def load_srp(srp_dir) -> tuple[SpeechRatePredictor, RunConfig]:
    srp_dir = Path(srp_dir)
    if not (srp_dir / "srp.avsf").exists():
        raise DataError(f"no speech-rate checkpoint at {srp_dir}; run `avcompress train-srp` first")
    scfg = load_config(srp_dir / "config.yaml", env={})
    model = build_srp(scfg)
    load_checkpoint(model, srp_dir / "srp.avsf")
    model.freeze()
    return model, scfg


def load_trained(run_dir) -> tuple[AVSRModel, RunConfig, RateSource | None]:
    run_dir = Path(run_dir)
    if not (run_dir / "model.avsf").exists():
        raise DataError(f"no trained model at {run_dir}; run `avcompress train` first")
    tcfg = load_config(run_dir / "config.yaml", env={})
    model = build_model(tcfg)
    load_checkpoint(model, run_dir / "model.avsf")
    rates = None
    if tcfg.alloc.use_rate:
        srp, _ = load_srp(tcfg.paths.srp)
        rates = RateSource(srp, (tcfg.alloc.r_lo, tcfg.alloc.r_hi))
    return model, tcfg, rates


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir: Path) -> dict:
    syn = cfg.synthesis()
    counts = split_counts(cfg.features.n_utts)
    for split, n in counts.items():
        if n > 0:
            generate_corpus(syn, n, split, out_dir)
    stats = corpus_stats(read_manifest(out_dir / "train.jsonl"))
    _write_json(out_dir / "stats.json", stats.to_dict())
    manifest_hash = sha256_of_tree(out_dir, exclude=("config.yaml", "metrics.json"))
    print(f"corpus: {out_dir}")
    print("utterances: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"mean speech rate (train): {stats.mean_words_per_s:.4f} words/s")
    print("duration histogram (s):")
    counts_h, edges = stats.duration_histogram
    for c, lo, hi in zip(counts_h, edges[:-1], edges[1:]):
        print(f"  [{lo:5.2f}, {hi:5.2f})  {c}")
    return {"counts": counts, "manifest_sha256": manifest_hash, "mean_words_per_s": stats.mean_words_per_s}


def cmd_train_srp(cfg: RunConfig, out_dir: Path) -> dict:
    root = _require_corpus(cfg)
    train = load_corpus(root / "train.jsonl")
    dev = load_corpus(root / "dev.jsonl")
    stats = CorpusStats.from_dict(json.loads((root / "stats.json").read_text()))
    labels = compute_rate_labels([it.utt for it in train + dev], stats)
    model = build_srp(cfg)
    res = train_srp(
        model, train, labels, cfg.srp_schedule(), cfg.srp.steps, cfg.srp.batch_size, cfg.seed,
        heldout=dev, heldout_labels=labels,
    )
    if not math.isfinite(res.heldout_mse):
        raise NumericError("held-out MSE is not finite")
    save_checkpoint(model, out_dir / "srp.avsf")
    _write_table(out_dir / "loss_curve", ["step", "loss"], [[i, f"{l:.8g}"] for i, l in enumerate(res.loss_curve)])
    print(f"held-out MSE: {res.heldout_mse:.6f}")
    return {"heldout_mse": res.heldout_mse, "checksum": res.checksum, "modality": cfg.srp.modality}


def cmd_train(cfg: RunConfig, out_dir: Path) -> dict:
    root = _require_corpus(cfg, ("train",))
    rates = None
    srp_before = None
    if cfg.alloc.use_rate:
        if not cfg.paths.srp:
            raise ConfigurationError("rate-aware allocation needs a speech-rate checkpoint; pass --srp <train-srp run dir>")
        srp, _ = load_srp(cfg.paths.srp)
        srp_before = srp.checksum()
        rates = RateSource(srp, (cfg.alloc.r_lo, cfg.alloc.r_hi))
    train = load_corpus(root / "train.jsonl")
    model = build_model(cfg)
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "mean_n_alloc"])

        def on_log(e):
            w.writerow([e.step, f"{e.loss:.8g}", f"{e.lr:.8g}", f"{e.mean_n_alloc:.6g}"])

        logs = train_pipeline(model, train, cfg.train_config(), rates, on_log)
    save_checkpoint(model, out_dir / "model.avsf")
    out = {"final_loss": logs[-1].loss, "checksum": model.checksum(), "steps": cfg.train.steps}
    if rates is not None:
        after = rates.srp.checksum()
        if after != srp_before:
            raise NumericError("speech-rate predictor changed during pipeline training")
        out["srp_checksum"] = after
    print(f"final loss: {logs[-1].loss:.6f}")
    return out


def _eval_rows(model, tcfg: RunConfig, cfg: RunConfig, rates, items, out_dir: Path) -> list[dict]:
    rows = []
    audio_only = cfg.eval.audio_only or tcfg.train.audio_only
    for snr in cfg.snr_list():
        res = evaluate(
            model, items, snr_db=snr, audio_only=audio_only, beam=cfg.eval.beam,
            temperature=cfg.eval.temperature, seed=cfg.seed, rates=rates,
            batch_size=cfg.eval.batch_size, max_len=cfg.eval.max_len,
        )
        with open(out_dir / f"utterances_snr_{_fmt_snr(snr)}.tsv", "w") as fh:
            for uid, w, hyp in res.lines:
                fh.write(f"{uid}\t{w:.6f}\t{hyp}\n")
        rows.append({"snr_db": _fmt_snr(snr), "wer": res.wer, "tokens_per_s": res.tokens_per_s})
    return rows


def cmd_eval(cfg: RunConfig, out_dir: Path) -> dict:
    if not cfg.paths.checkpoint:
        raise ConfigurationError("eval needs --checkpoint <train run dir>")
    model, tcfg, rates = load_trained(cfg.paths.checkpoint)
    corpus = cfg.paths.corpus or tcfg.paths.corpus
    root = _require_corpus(replace(cfg, paths=replace(cfg.paths, corpus=corpus)), (cfg.eval.split,))
    items = load_corpus(root / f"{cfg.eval.split}.jsonl")
    rows = _eval_rows(model, tcfg, cfg, rates, items, out_dir)
    audio_only = cfg.eval.audio_only or tcfg.train.audio_only
    _write_table(
        out_dir / "wer", ["snr_db", "wer", "tokens_per_s"],
        [[r["snr_db"], f"{r['wer']:.6f}", f"{r['tokens_per_s']:.6f}"] for r in rows],
    )
    for r in rows:
        print(f"snr {r['snr_db']:>5}  wer {r['wer']:.4f}  tokens/s {r['tokens_per_s']:.4f}")
    return {"rows": rows, "audio_only": audio_only, "split": cfg.eval.split}


def _sweep_one(args) -> dict:
    cfg, f_q, out_dir = args
    sub = copy.deepcopy(cfg)
    sub.alloc.f_q = float(f_q)
    sub_dir = Path(out_dir) / f"fq-{f_q:g}"
    sub_dir.mkdir()
    save_config(sub, sub_dir / "config.yaml")
    start = time.perf_counter()
    _write_json(sub_dir / "metrics.json", cmd_train(sub, sub_dir))
    _write_json(sub_dir / "timing.json", {"wall_seconds": time.perf_counter() - start})
    model, tcfg, rates = load_trained(sub_dir)
    items = load_corpus(Path(sub.paths.corpus) / f"{sub.eval.split}.jsonl")
    row = _eval_rows(model, tcfg, sub, rates, items, sub_dir)[0]
    return {"f_q": float(f_q), "use_rate": sub.alloc.use_rate, "wer": row["wer"], "tokens_per_s": row["tokens_per_s"]}


def cmd_sweep(cfg: RunConfig, out_dir: Path) -> dict:
    _require_corpus(cfg, ("train", cfg.eval.split))
    if cfg.alloc.use_rate and not cfg.paths.srp:
        raise ConfigurationError("rate-aware sweep needs --srp <train-srp run dir>")
    f_list = sorted(float(f) for f in cfg.sweep.f_q)
    jobs = [(cfg, f, out_dir) for f in f_list]
    if cfg.sweep.workers > 1:
        with ProcessPoolExecutor(cfg.sweep.workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    rows.sort(key=lambda r: r["f_q"])
    header = ["f_q", "wer", "tokens_per_s"]
    use_rate = any(r["use_rate"] for r in rows)
    if use_rate:
        header.insert(1, "use_rate")
    table = []
    for r in rows:
        line = [f"{r['f_q']:g}", f"{r['wer']:.6f}", f"{r['tokens_per_s']:.6f}"]
        if use_rate:
            line.insert(1, str(r["use_rate"]).lower())
        table.append(line)
    _write_table(out_dir / "sweep", header, table)
    print((out_dir / "sweep.txt").read_text(), end="")
    return {"rows": rows}


def cost_baseline(cfg: RunConfig) -> costing.PipelineConfig:
    c = cfg.costing
    return costing.PipelineConfig(
        "Baseline", "baseline", [1.0],
        baseline_tokens_per_s=c.baseline_tokens_per_s,
        baseline_fed_tokens_per_s=c.baseline_fed_tokens_per_s,
        instruction_tokens=c.instruction_tokens,
        transcript_tokens_per_s=c.transcript_tokens_per_s,
        beam=c.beam,
        audio_window_s=c.audio_window_s,
        fusion=cfg.fusion.variant,
    )


def cmd_cost_report(cfg: RunConfig, out_dir: Path) -> dict:
    duration, reports = costing.reference_rows(cost_baseline(cfg), cfg.costing.target_baseline_tflops)
    csv_text, aligned = costing.format_table(reports)
    (out_dir / "cost.csv").write_text(csv_text)
    (out_dir / "cost.txt").write_text(aligned)
    print(f"calibrated clip duration: {duration:.4f} s")
    print(aligned, end="")
    base, full = reports[0], reports[-1]
    red = costing.reduction_report(base, full)
    return {
        "calibrated_duration_s": duration,
        "baseline_total_flops": base.total_flops,
        "full_total_flops": full.total_flops,
        "token_reduction_pct": red["tokens_per_second"],
        "flops_reduction_pct": red["total_flops"],
    }


# -- argument parsing -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avcompress", description="Token-compressed audio-visual recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--runs", help="root directory for outputs (paths.runs)")
        sp.add_argument("--seed", type=int, help="random seed (MMS_SEED wins over this)")

    sp = sub.add_parser("gen-data", help="synthesize the corpus")
    common(sp)
    sp.add_argument("--n", type=int, help="total utterances across splits")

    sp = sub.add_parser("train-srp", help="train and freeze the speech-rate predictor")
    common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--modality", choices=["audio", "visual"])

    sp = sub.add_parser("train", help="train the compression pipeline")
    common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--srp", help="train-srp run directory")
    sp.add_argument("--f-q", type=float)
    sp.add_argument("--use-rate", action="store_true")
    sp.add_argument("--audio-only", action="store_true")

    sp = sub.add_parser("eval", help="WER per SNR condition")
    common(sp)
    sp.add_argument("--checkpoint", help="train run directory")
    sp.add_argument("--corpus")
    sp.add_argument("--snr", help="comma-separated SNRs in dB; 'inf' is clean")
    sp.add_argument("--split", choices=["train", "dev", "test"])
    sp.add_argument("--audio-only", action="store_true")

    sp = sub.add_parser("sweep", help="train and evaluate one model per query rate")
    common(sp)
    sp.add_argument("--corpus")
    sp.add_argument("--srp")
    sp.add_argument("--f-q", help="comma-separated query rates")
    sp.add_argument("--use-rate", action="store_true")
    sp.add_argument("--workers", type=int)

    sp = sub.add_parser("cost-report", help="analytical token/FLOPs table")
    common(sp)
    return p


def _resolve(args) -> RunConfig:
    sets = list(args.set)
    if args.runs:
        sets.append(f"paths.runs={args.runs}")
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    cfg = load_config(args.config, sets)
    cmd = args.command
    if cmd == "gen-data" and args.n is not None:
        cfg.features.n_utts = args.n
    if getattr(args, "corpus", None):
        cfg.paths.corpus = str(Path(args.corpus).resolve())
    if getattr(args, "srp", None):
        cfg.paths.srp = str(Path(args.srp).resolve())
    if getattr(args, "use_rate", False):
        cfg.alloc.use_rate = True
    if cmd == "train-srp" and args.modality:
        cfg.srp.modality = args.modality
    if cmd == "train":
        if args.f_q is not None:
            cfg.alloc.f_q = args.f_q
        if args.audio_only:
            cfg.train.audio_only = True
    if cmd == "eval":
        if args.checkpoint:
            cfg.paths.checkpoint = str(Path(args.checkpoint).resolve())
        if args.snr:
            cfg.eval.snr_db = [s.strip() for s in args.snr.split(",") if s.strip()]
        if args.split:
            cfg.eval.split = args.split
        if args.audio_only:
            cfg.eval.audio_only = True
        for s in cfg.eval.snr_db:
            parse_snr(s)
    if cmd == "sweep":
        if args.f_q:
            cfg.sweep.f_q = [float(x) for x in args.f_q.split(",") if x.strip()]
        if args.workers:
            cfg.sweep.workers = args.workers
    if cmd == "train" and cfg.alloc.use_rate and not cfg.paths.srp:
        raise ConfigurationError("--use-rate requires --srp <train-srp run dir>")
    return cfg


COMMANDS = {
    "gen-data": ("corpus", cmd_gen_data),
    "train-srp": ("srp", cmd_train_srp),
    "train": ("train", cmd_train),
    "eval": ("eval", cmd_eval),
    "sweep": ("sweep", cmd_sweep),
    "cost-report": ("cost", cmd_cost_report),
}


def _mark_failed(out_dir: Path | None, message: str) -> None:
    if out_dir is not None and out_dir.exists():
        (out_dir / "FAILED").write_text(message + "\n")


def run(argv: list[str] | None = None) -> tuple[int, Path | None]:
    """Run one subcommand; returns (exit code, output directory).

    A directory whose command failed keeps its config and gains a ``FAILED`` file.
    """
    out_dir = None
    try:
        args = _parser().parse_args(argv)
        cfg = _resolve(args)
        kind, fn = COMMANDS[args.command]
        out_dir = new_run_dir(cfg, kind)
        save_config(cfg, out_dir / "config.yaml")
        start = time.perf_counter()
        metrics = fn(cfg, out_dir)
        _write_json(out_dir / "metrics.json", metrics)
        # Kept apart from metrics.json, which must be identical across reruns.
        _write_json(out_dir / "timing.json", {"wall_seconds": time.perf_counter() - start})
        print(f"outputs: {out_dir}")
        return EXIT_OK, out_dir
    except (UsageError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        _mark_failed(out_dir, str(e))
        return EXIT_CONFIG, out_dir
    except (DataError, FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        _mark_failed(out_dir, str(e))
        return EXIT_DATA, out_dir
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        _mark_failed(out_dir, str(e))
        return EXIT_NUMERIC, out_dir


def main(argv: list[str] | None = None) -> int:
    return run(argv)[0]


if __name__ == "__main__":
    sys.exit(main())
