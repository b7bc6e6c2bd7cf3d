"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from laganet import tensor as T
from laganet.attention import CAM, SamRpe, build_reindex, cam_forward
from laganet.cli import main
from laganet.config import Config, LossConfig, SynthSpec, TrainConfig
from laganet.data import synth_generate
from laganet.errors import ConfigError
from laganet.evaluation import ablate, cmc_at_k, evaluate_model, format_table, mean_ap, rank_distances
from laganet.losses import batch_hard_triplet, smoothed_targets, total_loss, xent_loss
from laganet.tensor import Tensor, grad_check
from laganet.training import lr_at, train

from test_evaluation import oracle_cmc, oracle_lists, oracle_map, random_instance
from test_losses import exhaustive_triplet, pk_labels

ABLATION_EPOCHS = 15


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def synth7(tmp_path_factory):
    return synth_generate(SynthSpec(seed=7), tmp_path_factory.mktemp("synth7"))


def test_1_identity_at_init(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    ok = True
    cam = CAM()
    sams = {c: SamRpe(c, 3, 3, rng) for c in (8, 16)}
    for _ in range(50):
        c = int(rng.choice([8, 16]))
        e = rng.normal(size=(2, c, 3, 3)) * rng.uniform(0.1, 100)
        ok &= np.array_equal(cam(Tensor(e)).data, e)
        ok &= np.array_equal(sams[c](Tensor(e)).data, e)
    dt = time.perf_counter() - t0
    report(1, bool(ok) and dt < 1.0, f"CAM and SAM-RPE return the input bit-exactly on 50 inputs each ({dt:.2f} s)")


def test_2_gradient_suite(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()

    def leaf(*shape, lo=None):
        v = rng.normal(size=shape) if lo is None else rng.uniform(lo, lo + 2, size=shape)
        return Tensor(v, requires_grad=True)

    a, b = leaf(3, 4), leaf(3, 4)
    pos = leaf(3, 4, lo=0.5)
    m1, m2 = leaf(3, 4), leaf(4, 2)
    x3, x4 = leaf(4, 3, 5), leaf(2, 3, 5, 4)
    w4, cb = leaf(4, 3, 3, 3), leaf(4)
    wp = leaf(5, 3)
    gain, bias = leaf(3, lo=0.5), leaf(3)
    c = rng.normal(size=(3, 4))
    cases = {
        "add": (lambda: T.tsum((a + b) * c), [a, b]),
        "sub/neg": (lambda: T.tsum((a - b) * c), [a, b]),
        "mul": (lambda: T.tsum(a * b * c), [a, b]),
        "div": (lambda: T.tsum(a / pos * c), [a, pos]),
        "power": (lambda: T.tsum(T.power(pos, 3.0) * c), [pos]),
        "exp": (lambda: T.tsum(T.exp(a) * c), [a]),
        "log": (lambda: T.tsum(T.log(pos) * c), [pos]),
        "sqrt": (lambda: T.tsum(T.sqrt(pos) * c), [pos]),
        "relu": (lambda: T.tsum(T.relu(a) * c), [a]),
        "leaky_relu": (lambda: T.tsum(T.leaky_relu(a, 0.01) * c), [a]),
        "clamp_min": (lambda: T.tsum(T.clamp_min(a, 0.1) * c), [a]),
        "sum/mean": (lambda: T.tsum(T.tsum(a, axis=0) * c[0]) + T.mean(a * a), [a]),
        "reshape/transpose": (lambda: T.tsum(T.transpose(T.reshape(a, (4, 3))) * c), [a]),
        "take": (lambda: T.tsum(a[np.array([0, 2, 2]), np.array([1, 3, 3])] * c[0, :3]), [a]),
        "concat": (lambda: T.tsum(T.concat([a, b], axis=1) * np.hstack([c, c[:, ::-1]])), [a, b]),
        "flip": (lambda: T.tsum(T.flip(a, -1) * c), [a]),
        "matmul": (lambda: T.tsum(T.matmul(m1, m2) * rng_fixed(3, 2)), [m1, m2]),
        "softmax": (lambda: T.tsum(T.softmax_rows(a) * c), [a]),
        "log_softmax": (lambda: T.tsum(T.log_softmax(a) * c), [a]),
        "batch_norm": (lambda: T.tsum(T.batch_norm(x3, gain, bias, np.zeros(3), np.ones(3), True)
                                      * rng_fixed(4, 3, 5)), [x3, gain, bias]),
        "conv2d": (lambda: T.tsum(T.conv2d(x4, w4, cb, stride=2, padding=1) * rng_fixed(2, 4, 3, 2)), [x4, w4, cb]),
        "pointwise_conv": (lambda: T.tsum(T.pointwise_conv(x4, wp) * rng_fixed(2, 5, 5, 4)), [x4, wp]),
    }
    fixed = {}

    def rng_fixed(*shape):
        return fixed.setdefault(shape, np.random.default_rng(len(shape) * 31 + sum(shape)).normal(size=shape))

    errors = {k: grad_check(f, p) for k, (f, p) in cases.items()}

    e = leaf(2, 8, 2, 3)
    gamma = Tensor(0.7, requires_grad=True)
    up = rng.normal(size=(2, 8, 2, 3))
    errors["CAM"] = grad_check(lambda: T.tsum(cam_forward(e, gamma) * up), [e, gamma])
    sam = SamRpe(8, 2, 3, rng, table_std=0.5)
    sam.gamma.data[...] = 0.7
    errors["SAM-RPE"] = grad_check(lambda: T.tsum(sam(e) * up), [e] + sam.parameters())

    labels = pk_labels(2, 2)
    logits = [leaf(4, 2) for _ in range(6)]
    embs = [Tensor(rng.normal(size=(4, 3)) * 3, requires_grad=True) for _ in range(6)]
    errors["total_loss"] = grad_check(lambda: total_loss(logits, embs, labels, LossConfig(margin=0.3)).total,
                                      logits + embs)
    dt = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and dt < 120
    report(2, ok, f"{len(errors)} gradient checks, worst {worst} rel err {errors[worst]:.2e} ({dt:.1f} s)")


def test_3_attention_shapes(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    shapes_ok = True
    for _ in range(20):
        c = int(rng.choice([8, 16, 32]))
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        e = Tensor(rng.normal(size=(2, c, h, w)))
        a_c = CAM().attention_map(e).data
        a_s = SamRpe(c, h, w, rng).attention_map(e).data
        shapes_ok &= a_c.shape == (2, c, c) and a_s.shape == (2, h * w, h * w)
        worst = max(worst, np.abs(a_c.sum(-1) - 1).max(), np.abs(a_s.sum(-1) - 1).max())
    rejected = 0
    for bad in (4, 12, 20):
        try:
            SamRpe(bad, 2, 2, rng)
        except ConfigError:
            rejected += 1
    ok = bool(shapes_ok) and worst < 1e-9 and rejected == 3
    report(3, ok, f"attention maps have the right shapes, max row-sum error {worst:.1e}, {rejected}/3 bad C rejected")


def test_4_relative_position_semantics(report):
    rng = np.random.default_rng(4)
    cases_ok = (
        np.array_equal(build_reindex("height", 2, 1).matrix, [[0, 1, 0], [1, 0, 0]])
        and [int(np.argmax(r)) - 1 for r in build_reindex("height", 2, 2).matrix] == [0, 1, -1, 0]
        and np.array_equal(build_reindex("height", 1, 3).matrix, [[1], [0], [0]])
    )
    h, w = 4, 3
    m = SamRpe(8, h, w, rng)
    m.r_h.data[...] = 0.0
    m.r_w.data[...] = 0.0
    e = rng.normal(size=(2, 8, h, w))
    dev = 0.0
    for _ in range(20):
        perm = rng.permutation(h * w)
        shuffled = e.reshape(2, 8, -1)[:, :, perm].reshape(e.shape)
        ref = m.content_term(Tensor(e)).data.reshape(2, 8, -1)[:, :, perm]
        dev = max(dev, np.abs(m.content_term(Tensor(shuffled)).data.reshape(2, 8, -1) - ref).max())
    m2 = SamRpe(8, h, w, rng, table_std=1.0)
    m2.gamma.data[...] = 1.0
    rows = [1, 0, 2, 3]
    change = np.abs(m2(Tensor(e[:, :, rows])).data - m2(Tensor(e)).data[:, :, rows]).max()
    ok = bool(cases_ok) and dev < 1e-9 and change > 1e-6
    report(4, ok, f"reindex cases {'match' if cases_ok else 'differ'}, content-term deviation {dev:.1e}, "
                  f"row swap changes output by {change:.2e}")


def test_5_loss_oracles(report):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(200):
        P, K = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        emb = rng.integers(-4, 5, size=(P * K, int(rng.integers(1, 5)))).astype(float)
        labels = rng.permutation(pk_labels(P, K))
        mismatches += batch_hard_triplet(Tensor(emb), labels, 1.2).item() != exhaustive_triplet(emb, labels, 1.2)
    xent_err = max(abs(xent_loss(Tensor(np.zeros((3, c))), [0, 1, 1], 0.1).item() - math.log(c))
                   for c in (2, 10, 100))
    q = smoothed_targets(0, 10, 0.1)
    targets_ok = math.fsum(q) == 1.0 and abs(q[0] - 0.91) < 1e-15 and np.allclose(q[1:], 0.01, rtol=0, atol=1e-15)
    ok = mismatches == 0 and xent_err < 1e-10 and targets_ok
    report(5, ok, f"triplet oracle mismatches {mismatches}/200, uniform xent error {xent_err:.1e}, "
                  f"smoothed targets {'ok' if targets_ok else 'wrong'}")


def test_6_metric_oracles(report):
    from laganet.evaluation import average_precision

    rng = np.random.default_rng(6)
    checked = mismatches = 0
    while checked < 100:
        dist, q_ids, q_cams, g_ids, g_cams = random_instance(rng)
        lists = oracle_lists(dist, q_ids, q_cams, g_ids, g_cams, True)
        if not any(any(f) for f in lists):
            continue
        res = rank_distances(dist, q_ids, q_cams, g_ids, g_cams, True)
        same = all(cmc_at_k(res, k) == oracle_cmc(lists, k) for k in (1, 3, 5, 10)) and mean_ap(res) == oracle_map(lists)
        mismatches += not same
        checked += 1
    ap_err = abs(average_precision([1, 0, 1]) - 5 / 6)
    report(6, mismatches == 0 and ap_err < 1e-12,
           f"CMC/mAP oracle mismatches {mismatches}/100, AP(1,0,1) error {ap_err:.1e}")


def test_7_schedule(report):
    cfg = TrainConfig()
    got = [lr_at(e, cfg) for e in (1, 10, 40, 41, 61)]
    want = [8e-6, 8e-4, 8e-4, 4e-4, 2e-4]
    ok = all(math.isclose(g, w, rel_tol=1e-12) for g, w in zip(got, want))
    report(7, ok, "lr at epochs 1,10,40,41,61 = " + ", ".join(f"{g:.1e}" for g in got))


def test_8_desk_scale_retrieval(report, synth7):
    cfg = Config()
    cfg.train = replace(cfg.train, epochs=30)
    t0 = time.perf_counter()
    trainer, _ = train(synth7, cfg)
    rep = evaluate_model(trainer.model, synth7, cfg=cfg)
    dt = time.perf_counter() - t0
    chance = 1 / len(synth7.split("gallery"))
    ok = rep["rank1"] >= 0.90 and rep["mAP"] >= 0.80 and dt <= 900
    report(8, ok, f"rank-1 {rep['rank1']:.3f}, mAP {rep['mAP']:.3f} (chance {chance:.2f}), "
                  f"{rep['n_dropped']} dropped, {dt:.0f} s")


def test_9_ablation_trend(report, synth7):
    cfg = Config()
    cfg.train = replace(cfg.train, epochs=ABLATION_EPOCHS)
    rows = ablate(synth7, cfg, seeds=(0, 1, 2))
    by = {r.variant: r for r in rows}
    ok = by["+SAM-RPE"].mAP >= by["global"].mAP and by["+local"].mAP >= by["global"].mAP
    summary = ", ".join(f"{r.variant} {r.mAP:.3f}" for r in rows)
    (synth7.root / "ablation.txt").write_text(format_table(rows) + "\n")
    report(9, ok, f"mean mAP over 3 seeds at {ABLATION_EPOCHS} epochs: {summary}")


def test_10_pipeline_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 3, "warmup_epochs": 3}}))
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        codes = [main(["synth", "--config", str(cfg), "--out", str(d / "data")])]
        manifest = str(d / "data" / "manifest.tsv")
        codes.append(main(["train", "--config", str(cfg), "--manifest", manifest, "--out", str(d / "m.laga"),
                           "--log", str(d / "metrics.csv")]))
        for split in ("query", "gallery"):
            codes.append(main(["embed", "--config", str(cfg), "--ckpt", str(d / "m.laga"), "--manifest", manifest,
                               "--split", split, "--out", str(d / f"{split}.tsv")]))
        codes.append(main(["eval", "--query", str(d / "query.tsv"), "--gallery", str(d / "gallery.tsv"),
                           "--report", str(d / "report.json")]))
        assert codes == [0] * 5
        outputs.append(((d / "metrics.csv").read_bytes(), (d / "report.json").read_bytes()))
    ok = outputs[0] == outputs[1]
    report(10, ok, "two seeded synth/train/embed/eval runs give identical metrics.csv and report.json bytes")
