"""Acceptance criteria 1-9. Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 5-9 share one desk-scale 2+1 AWGN run trained from scratch in a
temporary directory (about 25 minutes on one CPU core).
"""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import VERDICTS
from micro import MICRO_DIMS, finite_difference_check, first_batches, joint_loss, micro_links, micro_paired
from semsic import experiments as ex
from semsic.baseline import ClassicalScheme, HuffmanCodebook, classical_sic_receive
from semsic.channel import link_for_snr
from semsic.codec import parameter_digest
from semsic.corpus import detokenize, make_batch
from semsic.metrics import bleu
from semsic.sic import SemanticSystem, semantic_sic_decode
from semsic.training import OptimizerConfig, TrainingPlan, pretrain_single_user, transmit_batches

ROOT = Path(__file__).resolve().parents[1]
SEMANTIC = ["full_retrain_si", "full_retrain_no_si", "partial_retrain_si", "partial_retrain_no_si"]
ACCEPT = {
    "name": "acceptance",
    "scenario": "two_plus_one",
    "channel": "awgn",
    "seeds": [0, 1, 2],
    "corpus": {"max_groups": 800},
    "training": {"pretrain_epochs": 15, "joint_epochs": 10, "retrain_epochs": 10},
}


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def _run_pytest(nodeids):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodeids],
                          cwd=ROOT, capture_output=True, text=True)
    return proc, time.perf_counter() - t0


CLOSED_FORM = [
    "tests/test_codec.py::test_positional_encoding_matches_high_precision_oracle",
    "tests/test_codec.py::test_positional_encoding_hand_values",
    "tests/test_codec.py::test_pack_hand_example",
    "tests/test_codec.py::test_unpack_hand_example_and_length_check",
    "tests/test_codec.py::test_pack_unpack_round_trip_exact",
    "tests/test_codec.py::test_normalization_hand_example",
    "tests/test_codec.py::test_power_invariant",
    "tests/test_metrics.py::test_cosine_examples",
    "tests/test_metrics.py::test_text_similarity_mean_and_missing_decodes",
    "tests/test_metrics.py::test_bleu_hand_examples",
    "tests/test_metrics.py::test_bleu_identity_and_empty_candidate",
    "tests/test_baseline.py::test_huffman_code_lengths_by_hand",
    "tests/test_baseline.py::test_single_word_vocabulary_gets_one_bit",
    "tests/test_baseline.py::test_huffman_round_trip",
    "tests/test_baseline.py::test_qam_energy_and_gray_labels",
    "tests/test_baseline.py::test_qam_round_trip",
    "tests/test_training.py::test_loss_ce_hand_value_and_perfect_prediction",
    "tests/test_training.py::test_loss_joint_and_fp_reductions",
]


def test_criterion_1_closed_form_suite():
    proc, seconds = _run_pytest(CLOSED_FORM)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(1, proc.returncode == 0 and seconds < 60, f"{summary}; {seconds:.1f}s < 60s")


def test_criterion_2_exact_cancellation():
    proc, seconds = _run_pytest([
        "tests/test_sic.py::test_perfect_reencoding_cancels_to_machine_precision",
        "tests/test_sic.py::test_two_phase_perfect_new_user_cancellation_is_bit_identical",
    ])
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(2, proc.returncode == 0 and seconds < 60, f"{summary}; {seconds:.1f}s < 60s")


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    sets, vocab = micro_paired()
    batches = first_batches(sets)
    links = micro_links()
    torch.manual_seed(3)
    system = SemanticSystem(len(vocab), MICRO_DIMS.with_frame(len(sets[0])), [1, 2, 3], use_si=True)
    system.ensure_ifgs([1, 2, 3])
    system.double().eval()
    checks = finite_difference_check(system, lambda: joint_loss(system, batches, links), n_params=24, seed=3)
    worst = max(c[4] for c in checks)
    seconds = time.perf_counter() - t0
    ok = len(vocab) <= 50 and len(checks) >= 20 and worst < 1e-3 and seconds < 300
    verdict(3, ok, f"{len(checks)} parameters, vocab {len(vocab)}, worst relative error {worst:.2e} < 1e-3, "
                   f"{seconds:.1f}s")


@pytest.mark.slow
def test_criterion_4_single_user_convergence():
    t0 = time.perf_counter()
    cfg = ex.ExperimentConfig.from_dict({"corpus": {"max_groups": 1000}})
    data = ex.prepare_data(cfg)
    ks = data.train[1]
    link = link_for_snr(1, 20.0)
    plan = TrainingPlan("pretrain_single", 20, 64, seed=0)
    result = pretrain_single_user(1, ks, data.vocab.size, cfg.dims, OptimizerConfig(), plan, link)
    system = result.system.eval()
    rows = ks.sentences[:200]
    refs, hyps = [], []
    gen = torch.Generator().manual_seed(123)
    with torch.no_grad():
        for start in range(0, len(rows), 64):
            batch = make_batch(rows[start:start + 64], cfg.dims.N)
            y, links, scales = transmit_batches({1: batch}, system, [link], 1.0, gen)
            ids = semantic_sic_decode(y, links, system, scales)[1]
            refs += [detokenize(r, data.vocab) for r in batch.id_matrix]
            hyps += [detokenize(r, data.vocab) for r in ids]
    score = bleu(refs, hyps, 1)
    seconds = time.perf_counter() - t0
    ok = len(ks) <= 1000 and data.vocab.size <= 1500 and score >= 0.9
    verdict(4, ok, f"BLEU-1 {score:.4f} >= 0.9 on {len(refs)} training sentences "
                   f"({len(ks)} sentences, vocab {data.vocab.size}, {seconds:.0f}s)")


@pytest.fixture(scope="module")
def shared(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg7 = ex.ExperimentConfig.from_dict(dict(ACCEPT, cases=[1, 2], methods=SEMANTIC + ["classical"]))
    data = ex.prepare_data(cfg7)
    run7 = ex.run_experiment(cfg7, out, data=data)
    cfg6 = cfg7.with_overrides(cases=[1, 2, 3, 4, 5, 6, 7], methods=["full_retrain_si"], seeds=[0])
    run6 = ex.run_experiment(cfg6, out, data=data)
    curves = ex.loss_comparison(cfg7, out, seeds=[0, 1, 2], case=1, data=data)
    return {"cfg": cfg7, "data": data, "out": out, "rows7": [_as_dict(r) for r in run7.rows],
            "rows6": [_as_dict(r) for r in run6.rows], "curves": curves}


def _as_dict(row):
    return {k: str(v) for k, v in vars(row).items()}


@pytest.mark.slow
def test_criterion_5_pretraining_advantage(shared):
    curves = shared["curves"]
    pairs = {s: (curves["pretrained"][s][4], curves["scratch"][s][4]) for s in (0, 1, 2)}
    wins = sum(p < q for p, q in pairs.values())
    detail = ", ".join(f"seed {s}: {p:.3f} < {q:.3f}" for s, (p, q) in pairs.items())
    verdict(5, wins == 3, f"{wins}/3 seeds, epoch-5 joint loss pretrained vs scratch; {detail}")


def _inversions(values):
    return [values[k] - values[k + 1] for k in range(len(values) - 1) if values[k + 1] < values[k]]


@pytest.mark.slow
def test_criterion_6_snr_trend(shared):
    parts, ok = [], True
    for metric in ("similarity", "bleu1"):
        table = ex.summarize(shared["rows6"], metric)["full_retrain_si"]
        values = [table[c] for c in range(1, 8)]
        inv = _inversions(values)
        ok &= len(inv) == 0 or (len(inv) == 1 and inv[0] <= 0.02)
        parts.append(f"{metric} " + " ".join(f"{v:.3f}" for v in values)
                     + f" inversions {[round(i, 4) for i in inv]}")
    verdict(6, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_7_side_information_ordering(shared):
    table = ex.summarize(shared["rows7"], "bleu1")
    ok, parts = True, []
    for case in (1, 2):
        for mode in ("full", "partial"):
            si, no = table[f"{mode}_retrain_si"][case], table[f"{mode}_retrain_no_si"][case]
            ok &= si >= no
            parts.append(f"case {case} {mode}: {si:.3f} >= {no:.3f}")
    verdict(7, ok, "mean-over-3-seeds min BLEU-1, " + ", ".join(parts))


@pytest.mark.slow
def test_criterion_8_partial_freeze_and_cost(shared):
    cfg, data, out = shared["cfg"], shared["data"], shared["out"]
    pipe = ex.Pipeline(cfg, data, out)
    frozen_ok = True
    for seed in cfg.seeds:
        for case in cfg.cases:
            for method, use_si in (("partial_retrain_si", True), ("partial_retrain_no_si", False)):
                old, _ = pipe.joint(seed, case, use_si)
                new, _ = pipe.retrained(seed, case, method)
                for u in cfg.old_users:
                    frozen_ok &= parameter_digest(old.user_modules(u)) == parameter_digest(new.user_modules(u))
    assert not pipe.store.trained  # everything above came from the shared run's checkpoints
    rows = shared["rows7"]
    speed = {m: float(np.mean([float(r["seconds_per_it"]) for r in rows if r["method"] == m])) for m in SEMANTIC}
    faster = speed["partial_retrain_si"] < speed["full_retrain_si"] and \
        speed["partial_retrain_no_si"] < speed["full_retrain_no_si"]
    verdict(8, frozen_ok and faster,
            f"old-user checksums unchanged: {frozen_ok}; s/it partial {speed['partial_retrain_si']:.3f} < full "
            f"{speed['full_retrain_si']:.3f} (SI), partial {speed['partial_retrain_no_si']:.3f} < full "
            f"{speed['full_retrain_no_si']:.3f} (no SI)")


@pytest.mark.slow
def test_criterion_9_classical_baseline(shared):
    table = ex.summarize(shared["rows7"], "bleu1")
    classical = table["classical"][1]
    below = all(classical < table[m][1] for m in SEMANTIC)
    # interference-free single user at 30 dB
    cfg, data = shared["cfg"], shared["data"]
    codebook = HuffmanCodebook.from_sentences(data.lines)
    scheme = ClassicalScheme(codebook, cfg.dims.N * cfg.dims.c // 2, cfg.raw["classical"]["repetition"])
    texts = data.test[1].texts()
    link = link_for_snr(1, 30.0)
    frame = scheme.transmit(texts, link.power, 1)
    rng = np.random.default_rng(9)
    z = (rng.standard_normal(len(frame.symbols)) + 1j * rng.standard_normal(len(frame.symbols))) * math.sqrt(0.5)
    decoded = classical_sic_receive(link.h * frame.symbols + z, [link], {1: scheme}, {1: frame.scale}, len(texts))[1]
    exact = bleu(texts, decoded, 1)
    others = ", ".join(f"{m} {table[m][1]:.3f}" for m in SEMANTIC)
    verdict(9, below and exact == 1.0,
            f"case 1 classical min BLEU-1 {classical:.3f} below {others}; 30 dB single user BLEU-1 {exact:.4f} "
            f"on {len(texts)} sentences")
