"""Acceptance criteria 1-10, each reported as one PASS/FAIL line in the summary.

Criteria 6-8 train desk-scale models through the CLI (configs/desk.yaml);
expect roughly an hour on one CPU. Set AVC_ACCEPTANCE_DIR to keep the runs.
"""

import csv
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from avcompress.avqformer import AllocationPolicy, Projector, QFormerLayer, allocate, allocation_counts
from avcompress.cli import load_srp, load_trained, run
from avcompress.costing import CostReport, reduction_report, reference_rows, token_throughput
from avcompress.decoder import beam_search, beam_search_logits, greedy_decode, greedy_logits
from avcompress.features import (
    CorpusStats,
    FeatureSequence,
    SynthesisConfig,
    SyntheticWorld,
    compute_rate_labels,
    decode_features,
    encode_features,
    load_corpus,
    synthesize_utterance,
)
from avcompress.fusion import AttentionFusion
from avcompress.numkernel import (
    MultiHeadAttention,
    cross_entropy,
    finite_diff_check,
    layer_norm,
    matmul,
    mse_loss,
    no_grad,
    softmax,
    tensor,
)
from avcompress.pipeline import BatchOptions, make_batch
from avcompress.srp import predict_batch

from conftest import CONFIGS


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def wall(run_dir):
    return json.loads((run_dir / "timing.json").read_text())["wall_seconds"]


# -- 1-5: analytic ----------------------------------------------------------------------


def test_c1_allocation_oracle(criterion):
    T = np.arange(1, 501)
    halves = np.arange(1, 13)  # f_Q = halves / 2
    hundredths = np.arange(50, 201)  # r = hundredths / 100
    start = time.perf_counter()
    got = allocation_counts(halves[:, None, None] / 2, T[None, :, None] / 25, hundredths[None, None, :] / 100)
    kernel_s = time.perf_counter() - start
    # exact integer arithmetic: f_Q * T / 25 * r = halves * T * hundredths / 5000
    oracle = np.maximum(1, (halves[:, None, None] * T[None, :, None] * hundredths[None, None, :]) // 5000)
    start = time.perf_counter()
    scalar_ok = all(
        allocate(AllocationPolicy(k / 2, use_rate=True), int(t), 25, r_s=m / 100).n_alloc == oracle[k - 1, t - 1, m - 50]
        for k in halves
        for m in hundredths
        for t in T
    )
    scalar_s = time.perf_counter() - start
    ok = np.array_equal(got, oracle) and scalar_ok and kernel_s < 1.0
    criterion(
        "C1 allocation oracle",
        ok,
        f"{oracle.size} grid points exact; kernel {kernel_s:.3f}s, scalar API {scalar_s:.2f}s",
    )


def test_c2_token_arithmetic(criterion):
    start = time.perf_counter()
    red = reduction_report(CostReport("b", 25, 1, 1, 1, 1), CostReport("o", 3.538, 1, 1, 1, 1))["tokens_per_second"]
    base = token_throughput(None, [1.7, 3.0, 5.2], mode="baseline")
    fusion = token_throughput(None, [1.7, 3.0, 5.2], mode="fusion")
    secs = time.perf_counter() - start
    ok = round(red, 1) == 85.8 and base == 25.0 and fusion == 12.5 and secs < 1.0
    criterion("C2 token arithmetic", ok, f"reduction {red:.2f}%, baseline {base}, fusion {fusion}")


def test_c3_floor_effect(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    durations = np.round(rng.uniform(2, 8, 2000) * 25) / 25
    pol = AllocationPolicy(3)
    short, long = (token_throughput(pol, durations * s) for s in (1, 10))
    secs = time.perf_counter() - start
    ok = 2.7 <= short < 3.0 and short < long <= 3.0 and 3.0 - long < (3.0 - short) / 5 and secs < 5.0
    criterion("C3 floor effect", ok, f"tokens/s {short:.4f} on 2-8 s clips, {long:.4f} at x10 durations")


def test_c4_flops_ratio(criterion):
    start = time.perf_counter()
    duration, rows = reference_rows()
    secs = time.perf_counter() - start
    base, full = rows[0], rows[-1]
    red = reduction_report(base, full)["total_flops"]
    base_t = base.total_flops / 1e12
    ok = abs(base_t - 2.24) <= 0.02 * 2.24 and abs(red - 35.7) <= 5.0 and secs < 1.0
    criterion(
        "C4 FLOPs ratio",
        ok,
        f"baseline {base_t:.4f}T at {duration:.3f}s, full config {full.total_flops / 1e12:.4f}T, reduction {red:.1f}%",
    )


def _gradcheck_cases(seed):
    rng = np.random.default_rng(seed)

    def t(*shape):
        return tensor(rng.standard_normal(shape), requires_grad=True)

    mha = MultiHeadAttention(8, 2, rng)
    qf = QFormerLayer(8, 2, 16, rng)
    proj = Projector(6, 4, rng)
    fus = AttentionFusion(8, 2, rng)
    targets = rng.integers(0, 7, 5)
    goal = rng.standard_normal((3, 4))
    a, b, x, ln_w, ln_b = t(3, 4), t(4, 5), t(4, 6), t(6), t(6)
    q, mem, m = t(3, 8), t(5, 8), t(3, 6)
    fa, fv = t(4, 8), t(4, 8)
    ce, mse = t(5, 7), t(3, 4)
    params = lambda mod: [p for _, p in mod.named_parameters()]  # noqa: E731
    return {
        "matmul": (lambda u, v: matmul(u, v), [a, b]),
        "softmax": (lambda u: softmax(u, axis=-1), [x]),
        "layer_norm": (lambda u, w, c: layer_norm(u, w, c), [x, ln_w, ln_b]),
        "attention": (lambda u, *_: mha(u, u, causal=True), [q] + params(mha)),
        "qformer_layer": (lambda u, v, *_: qf(u, v), [q, mem] + params(qf)),
        "projection": (lambda u, *_: proj(u), [m] + params(proj)),
        "mmattn_fusion": (lambda u, v, *_: fus(u, v), [fa, fv] + params(fus)),
        "cross_entropy": (lambda u: cross_entropy(u, targets), [ce]),
        "mse": (lambda u: mse_loss(u, goal), [mse]),
    }


def test_c5_gradient_integrity(criterion):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, (fn, inputs) in _gradcheck_cases(seed).items():
            err = finite_diff_check(fn, inputs, seed=seed).max_rel_error
            worst[name] = max(worst.get(name, 0.0), err)
    secs = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and secs < 120
    detail = f"20 seeds x {len(worst)} ops in {secs:.1f}s; worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion("C5 gradient integrity", ok, detail)


# -- 6-8: desk-scale training -------------------------------------------------------------


def test_c6_query_rate_knee(criterion, desk_sweep):
    rows = read_rows(desk_sweep / "sweep.csv")
    wer = {float(r["f_q"]): float(r["wer"]) for r in rows}
    times = [wall(desk_sweep / f"fq-{f:g}") for f in sorted(wer)]
    steps = [json.loads((desk_sweep / f"fq-{f:g}" / "metrics.json").read_text())["steps"] for f in sorted(wer)]
    seq = [wer[f] for f in sorted(wer)]
    monotone = all(b <= a + 0.01 for a, b in zip(seq, seq[1:]))
    ok = (
        sorted(wer) == [1.0, 2.0, 3.0, 4.0, 5.0]
        and wer[5.0] < 0.05
        and wer[1.0] >= 2 * wer[5.0]
        and monotone
        and max(steps) <= 5000
        and max(times) <= 45 * 60
    )
    detail = "WER by f_Q " + ", ".join(f"{f:g}: {100 * w:.2f}%" for f, w in sorted(wer.items()))
    detail += f"; {max(steps)} steps, slowest run {max(times) / 60:.1f} min"
    criterion("C6 query-rate knee", ok, detail)


def test_c7_speech_rate_predictor(criterion, desk_srp, desk_sweep, desk_rate_aware):
    mse = json.loads((desk_srp / "metrics.json").read_text())["heldout_mse"]
    srp_min = wall(desk_srp) / 60
    train_dir, eval_dir = desk_rate_aware
    aware = read_rows(eval_dir / "wer.csv")[0]
    agnostic = next(r for r in read_rows(desk_sweep / "sweep.csv") if float(r["f_q"]) == 2.0)
    gain = float(agnostic["wer"]) - float(aware["wer"])
    extra = float(aware["tokens_per_s"]) - float(agnostic["tokens_per_s"])
    ok = mse < 0.01 and srp_min <= 10 and gain >= 0.01 and extra < 1.0
    criterion(
        "C7 speech-rate predictor",
        ok,
        f"held-out MSE {mse:.4f} in {srp_min:.1f} min; f_Q=2 WER {100 * float(agnostic['wer']):.2f}% -> "
        f"{100 * float(aware['wer']):.2f}% ({100 * gain:+.2f} pp), tokens/s +{extra:.3f}",
    )


def test_c8_noise_robustness(criterion, desk_noise):
    def at(run_dir, snr):
        return float(next(r for r in read_rows(run_dir / "wer.csv") if r["snr_db"] == snr)["wer"])

    av, ao = at(desk_noise["av"], "-5"), at(desk_noise["audio_only"], "-5")
    ok = av < ao and av <= 0.8 * ao
    rel = (1 - av / ao) * 100 if ao > 0 else float("nan")
    criterion(
        "C8 noise robustness",
        ok,
        f"-5 dB, f_Q=3: audio-visual {100 * av:.2f}% vs audio-only {100 * ao:.2f}% ({rel:.0f}% lower); "
        f"clean {100 * at(desk_noise['av'], 'inf'):.2f}% vs {100 * at(desk_noise['audio_only'], 'inf'):.2f}%",
    )


# -- 9-10: contracts ----------------------------------------------------------------------


def test_c9_decoding_contracts(criterion, desk_sweep):
    model, tcfg, _ = load_trained(desk_sweep / "fq-3")
    items = load_corpus(f"{tcfg.paths.corpus}/test.jsonl")[:100]
    start = time.perf_counter()
    batch = make_batch(model, items, np.random.default_rng(0), BatchOptions())
    with no_grad():
        mm = model.multimodal_tokens(batch).data
    beam_eq = temp_eq = 0
    for b in range(len(items)):
        tokens = mm[b, : batch.n_alloc[b]]
        greedy = greedy_decode(model.decoder, model.vocab, tokens, max_len=16)
        beam_eq += beam_search(model.decoder, model.vocab, tokens, beam=1, temperature=0.3, max_len=16).tokens == greedy.tokens
        temp_eq += all(
            greedy_decode(model.decoder, model.vocab, tokens, max_len=16, temperature=t).tokens == greedy.tokens
            for t in (0.1, 0.3, 3.0)
        )
    table = {
        (): np.log([0.6, 0.4, 1e-9]),
        (0,): np.log([0.3, 0.3, 0.4]),
        (1,): np.log([0.1, 0.8, 0.1]),
        (1, 1): np.log([0.05, 0.05, 0.9]),
    }
    uniform = np.full(3, -math.log(3))

    def fn(prefixes):
        return np.array([table.get(tuple(p), uniform) for p in prefixes])

    def logprob(seq):
        return sum(fn([list(seq[:i])])[0][seq[i]] for i in range(len(seq)))

    finished = [s + (2,) for n in range(3) for s in itertools.product((0, 1), repeat=n)]
    oracle = list(max(finished, key=logprob))
    hand_greedy = greedy_logits(fn, 2, max_len=3).tokens
    hand_beam = beam_search_logits(fn, 2, beam=2, temperature=1.0, max_len=3).tokens
    secs = time.perf_counter() - start
    ok = beam_eq == 100 and temp_eq == 100 and hand_beam == oracle and hand_greedy != oracle and secs < 30
    criterion(
        "C9 decoding contracts",
        ok,
        f"beam=1==greedy {beam_eq}/100, temperature-invariant {temp_eq}/100, "
        f"hand model greedy {hand_greedy} vs beam {hand_beam} (oracle {oracle}), {secs:.1f}s",
    )


def test_c10_format_and_determinism(criterion, tmp_path, monkeypatch):
    monkeypatch.delenv("MMS_SEED", raising=False)
    rng = np.random.default_rng(10)
    round_trips = 0
    for _ in range(1000):
        frames = (rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 33)))) * 10).astype(np.float32)
        modality = ["audio", "video", "fused"][int(rng.integers(3))]
        seq = FeatureSequence(modality, float(rng.choice([1.0, 25.0, 50.0])), frames)
        back = decode_features(encode_features(seq))
        round_trips += back.frames.tobytes() == frames.tobytes() and back.modality == modality
    first = _tiny_pipeline(tmp_path / "runs", None)
    second = _tiny_pipeline(tmp_path / "runs", first)
    same = {k: (first[k] / name).read_bytes() == (second[k] / name).read_bytes() for k, name in _COMPARED}
    ok = round_trips == 1000 and all(same.values())
    criterion(
        "C10 format and determinism",
        ok,
        f"AVSF round trips {round_trips}/1000; rerun identical: " + ", ".join(f"{k}:{v}" for k, v in same.items()),
    )


_COMPARED = [
    ("gen-data", "metrics.json"),
    ("train-srp", "metrics.json"),
    ("train", "metrics.json"),
    ("train", "model.avsf"),
    ("eval", "metrics.json"),
    ("eval", "wer.csv"),
]


def _tiny_pipeline(runs, previous):
    """gen-data -> train-srp -> train -> eval; with ``previous``, each step reruns from its saved config."""

    def step(*argv):
        code, out = run([str(a) for a in argv])
        assert code == 0, argv
        return out

    if previous is None:
        base = ["--config", CONFIGS / "tiny.yaml", "--runs", runs]
        corpus = step("gen-data", *base)
        srp = step("train-srp", *base, "--corpus", corpus)
        train = step("train", *base, "--corpus", corpus, "--srp", srp, "--use-rate")
        ev = step("eval", *base, "--checkpoint", train)
    else:

        def cfg(kind):
            return ["--config", previous[kind] / "config.yaml"]

        corpus = step("gen-data", *cfg("gen-data"))
        srp = step("train-srp", *cfg("train-srp"), "--corpus", corpus)
        train = step("train", *cfg("train"), "--corpus", corpus, "--srp", srp)
        ev = step("eval", *cfg("eval"), "--checkpoint", train, "--corpus", corpus)
    return {"gen-data": corpus, "train-srp": srp, "train": train, "eval": ev}


# -- trained-model properties (not numbered criteria) -------------------------------------


@pytest.fixture(scope="module")
def audio_srp(desk_srp):
    model, cfg = load_srp(desk_srp)
    items = load_corpus(f"{cfg.paths.corpus}/test.jsonl")
    stats = CorpusStats.from_dict(json.loads((Path(cfg.paths.corpus) / "stats.json").read_text()))
    return model, cfg, items, compute_rate_labels([it.utt for it in items], stats)


def test_srp_is_length_robust(audio_srp):
    model, _, items, _ = audio_srp
    items = items[:50]
    once = predict_batch(model, [model.prepare(it.audio) for it in items])
    doubled = [
        FeatureSequence("audio", it.audio.frame_rate_hz, np.concatenate([it.audio.frames, it.audio.frames]))
        for it in items
    ]
    twice = predict_batch(model, [model.prepare(s) for s in doubled])
    assert np.max(np.abs(twice - once)) < 0.1


def test_srp_orders_rates_and_hits_unit_label(audio_srp):
    model, cfg, items, labels = audio_srp

    def predictions(rate):
        syn = SynthesisConfig(rate_range_words_per_s=(rate, rate), seed=cfg.seed)
        world = SyntheticWorld.from_config(syn)
        seqs = [synthesize_utterance(syn, world, "probe", i)[1] for i in range(20)]
        return predict_batch(model, [model.prepare(s) for s in seqs])

    assert np.all(predictions(4.0) > predictions(2.0))
    near_one = [it for it in items if abs(labels[it.utt.id] - 1.0) < 0.05]
    pred = predict_batch(model, [model.prepare(it.audio) for it in near_one])
    assert len(near_one) >= 5
    assert np.all(np.abs(pred - np.array([labels[it.utt.id] for it in near_one])) < 0.1)


def test_visual_srp_near_parity(desk_srp, desk_srp_visual):
    audio = json.loads((desk_srp / "metrics.json").read_text())["heldout_mse"]
    visual = json.loads((desk_srp_visual / "metrics.json").read_text())["heldout_mse"]
    assert visual <= 2 * audio


def test_srp_frozen_through_training(desk_srp, desk_rate_aware):
    train_dir, _ = desk_rate_aware
    assert json.loads((train_dir / "metrics.json").read_text())["srp_checksum"] == json.loads(
        (desk_srp / "metrics.json").read_text()
    )["checksum"]
