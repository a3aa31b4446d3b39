"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 run the shipped desk-scale benchmarks end to end and take a few
minutes; everything else is fast. Run just this module with:

    pytest tests/test_acceptance.py -v -s
"""

import json
import time

import numpy as np
import pytest

from vgfm import kernels
from vgfm.alignment import ProjectionHead, contrastive_loss, image_alignment_loss, sinkhorn_assign
from vgfm.bench import high_shift_world, mining_benchmark, run_benchmark, standard_world
from vgfm.cli import main as cli_main
from vgfm.core import Box, FeatureMap, iou, log_softmax, roi_align, softmax
from vgfm.prototypes import extract_prototypes, kmeans
from vgfm.rng import Rng
from vgfm.trainer import detection_loss, ema_update
from vgfm.world import WorldConfig, generate_world

from .oracles import (
    brute_force_kmeans,
    central_difference_grad,
    cross_entropy_direct,
    dense_roi_average,
    raster_iou,
    relative_error,
    scalar_bilinear,
    sinkhorn_longrun,
    softmax_direct,
)

SEEDS = (1, 2, 3, 4, 5)


def report(criterion: str, ok: bool, detail: str):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


# --------------------------------------------------------------------------
# shared benchmark runs (criteria 7 and 8)
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ordering_runs(tmp_path_factory):
    out = {}
    for seed in SEEDS:
        for mode in ("mt_semi", "vpm", "full_vg"):
            r = run_benchmark(mode, seed, "standard", tmp_path_factory.mktemp(f"ord_{mode}_{seed}"))
            out[(mode, seed)] = r["summary"]
    return out


@pytest.fixture(scope="module")
def stability_runs(tmp_path_factory):
    out = {}
    for seed in SEEDS:
        for mode in ("source_free", "mt_semi", "vpm", "full_vg"):
            t0 = time.time()
            r = run_benchmark(mode, seed, "stability", tmp_path_factory.mktemp(f"st_{mode}_{seed}"))
            out[(mode, seed)] = dict(r["summary"], runtime=time.time() - t0)
    return out


# --------------------------------------------------------------------------
# criterion 1: kernel-oracle equivalence, 100 randomized instances each, <30s
# --------------------------------------------------------------------------


def test_criterion_1_kernel_oracles():
    t0 = time.time()
    rng = np.random.default_rng(100)

    worst_bl = 0.0
    for _ in range(100):
        h, w, c = rng.integers(2, 9), rng.integers(2, 9), rng.integers(1, 5)
        data = rng.standard_normal((h, w, c))
        fmap = FeatureMap(data=data, stride=1.0)
        x = rng.uniform(0, w - 1)
        y = rng.uniform(0, h - 1)
        got = kernels.bilinear_many(fmap.data, np.array([x]), np.array([y]))[0]
        want = scalar_bilinear(data, x, y)
        worst_bl = max(worst_bl, float(np.abs(got - want).max()))
    assert worst_bl <= 1e-6

    # roi_align vs the dense-sampling oracle at matched density: bins=50 puts
    # the pooled samples on the oracle's own 100x100 midpoint grid
    worst_roi = 0.0
    for _ in range(100):
        h, w = 8, 8
        c = int(rng.integers(1, 4))
        data = rng.standard_normal((h, w, c))
        stride = float(rng.uniform(4, 16))
        fmap = FeatureMap(data=data, stride=stride)
        x1 = rng.uniform(0.5, 3.0)
        y1 = rng.uniform(0.5, 3.0)
        box = Box(
            x1 * stride, y1 * stride,
            (x1 + rng.uniform(1.5, 4.0)) * stride, (y1 + rng.uniform(1.5, 4.0)) * stride,
        )
        rect = (
            box.x1 / stride - 0.5, box.y1 / stride - 0.5,
            box.x2 / stride - 0.5, box.y2 / stride - 0.5,
        )
        got = roi_align(fmap, box, bins=50)
        want = dense_roi_average(data, rect, n=100)
        worst_roi = max(worst_roi, float(np.abs(got - want).max()))
    assert worst_roi <= 1e-5

    worst_iou = 0.0
    for _ in range(100):
        x1, y1 = rng.uniform(0, 10, 2)
        a = Box(x1, y1, x1 + rng.uniform(1, 8), y1 + rng.uniform(1, 8))
        x1, y1 = rng.uniform(0, 10, 2)
        b = Box(x1, y1, x1 + rng.uniform(1, 8), y1 + rng.uniform(1, 8))
        got = iou(a, b)
        want = raster_iou((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2))
        worst_iou = max(worst_iou, abs(got - want))
    assert worst_iou <= 1e-3

    worst_sm = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        v = rng.uniform(-20, 20, n)
        worst_sm = max(worst_sm, float(np.abs(softmax(v) - softmax_direct(v)).max()))
        target = int(rng.integers(0, n))
        ce = -log_softmax(v)[target]
        worst_sm = max(worst_sm, abs(ce - cross_entropy_direct(v, target)))
    assert worst_sm <= 1e-10

    elapsed = time.time() - t0
    report(
        "1 (kernel oracles)",
        elapsed < 30.0,
        f"bilinear<= {worst_bl:.1e}, roi<= {worst_roi:.1e}, iou<= {worst_iou:.1e}, "
        f"softmax/ce<= {worst_sm:.1e}, runtime {elapsed:.1f}s < 30s",
    )


# --------------------------------------------------------------------------
# criterion 2: k-means objective monotone; exact recovery; brute-force match
# --------------------------------------------------------------------------


def test_criterion_2_kmeans():
    rng = np.random.default_rng(200)
    # monotonicity is asserted inside kmeans on every iteration; run 50 fits
    for i in range(50):
        n = int(rng.integers(10, 60))
        d = int(rng.integers(2, 6))
        k = int(rng.integers(2, 6))
        kmeans(rng.standard_normal((n, d)), k, Rng(i, ("acc2",)))

    # exact recovery on separated duplicate fixtures
    for k in (2, 3):
        centers = rng.uniform(-50, 50, size=(k, 3))
        while np.min(
            np.linalg.norm(centers[:, None] - centers[None, :], axis=2) + np.eye(k) * 1e9
        ) < 20:
            centers = rng.uniform(-50, 50, size=(k, 3))
        points = np.repeat(centers, 4, axis=0)
        res = kmeans(points, k, Rng(k, ("acc2fix",)), n_init=5)
        assert res.objective <= 1e-18

    # brute-force optimal partitions on all instances with n <= 8, K <= 3
    matched = 0
    for i in range(15):
        n = int(rng.integers(4, 9))
        k = int(rng.integers(2, 4))
        x = rng.standard_normal((n, 2))
        res = kmeans(x, k, Rng(i, ("acc2bf",)), n_init=30)
        best = brute_force_kmeans(x, k)
        assert res.objective <= best + 1e-9, (i, res.objective, best)
        matched += 1
    report("2 (k-means)", True, f"50 monotone fits, exact recovery, {matched} brute-force matches")


# --------------------------------------------------------------------------
# criterion 3: sinkhorn marginals and long-run oracle agreement
# --------------------------------------------------------------------------


def test_criterion_3_sinkhorn():
    rng = np.random.default_rng(300)
    worst_marg = 0.0
    worst_oracle = 0.0
    for _ in range(20):
        init = rng.standard_normal((5, 3))
        out = sinkhorn_assign(init, eps=0.05, tol=1e-12, max_iter=200_000)
        assert out.converged
        worst_marg = max(
            worst_marg,
            float(np.abs(out.a.sum(axis=1) - 1.0).max()),
            float(np.abs(out.a.sum(axis=0) - 5.0 / 3.0).max()),
        )
        want = sinkhorn_longrun(init, eps=0.05, iterations=100_000)
        worst_oracle = max(worst_oracle, float(np.abs(out.a - want).max()))
    ok = worst_marg <= 1e-6 and worst_oracle <= 1e-8
    report(
        "3 (sinkhorn)", ok,
        f"marginal violation <= {worst_marg:.1e} (tol 1e-6), "
        f"oracle gap <= {worst_oracle:.1e} (tol 1e-8) on 20 random 5x3 instances",
    )


# --------------------------------------------------------------------------
# criterion 4: analytic gradients vs central finite differences, 30 each
# --------------------------------------------------------------------------


def test_criterion_4_gradient_suite():
    h = 1e-5
    worst = {"contrastive": 0.0, "image_alignment": 0.0, "detection": 0.0}

    for i in range(30):
        rng = np.random.default_rng(400 + i)
        c, k, d, dq = 2, 2, 5, 4
        head = ProjectionHead.init(d, dq, Rng(i, ("acc4c",)), levels=1)
        batch = rng.standard_normal((c, k, dq))
        ref = rng.standard_normal((c, k, d))
        bm = np.ones((c, k), bool)
        rm = np.ones((c, k), bool)
        res = contrastive_loss(batch, bm, ref, rm, head)
        num = central_difference_grad(
            lambda x: contrastive_loss(x, bm, ref, rm, head).loss, batch.copy(), h
        )
        err = relative_error(res.grad_prototypes, num)
        # head parameter gradients on a couple of instances (expensive)
        if i < 5:
            for name in ("w1", "b2", "w3"):
                arr = getattr(head, name)
                num_p = central_difference_grad(
                    lambda _x: contrastive_loss(batch, bm, ref, rm, head).loss, arr, h
                )
                err = max(err, relative_error(res.head_grads[name], num_p))
        worst["contrastive"] = max(worst["contrastive"], err)

    for i in range(30):
        rng = np.random.default_rng(450 + i)
        d, dq = 4, 3
        head = ProjectionHead.init(d, dq, Rng(i, ("acc4i",)), levels=1)
        vfm = FeatureMap(data=rng.standard_normal((4, 5, d)), stride=8.0)
        sdata = rng.standard_normal((3, 4, dq))
        res = image_alignment_loss([FeatureMap(data=sdata, stride=8.0)], vfm, head)
        num = central_difference_grad(
            lambda x: image_alignment_loss([FeatureMap(data=x, stride=8.0)], vfm, head).loss,
            sdata.copy(), h,
        )
        err = relative_error(res.map_grads[0], num)
        if i < 5:
            arr = head.conv_w[0]
            num_p = central_difference_grad(
                lambda _x: image_alignment_loss(
                    [FeatureMap(data=sdata, stride=8.0)], vfm, head
                ).loss,
                arr, h,
            )
            err = max(err, relative_error(res.conv_w_grads[0], num_p))
        worst["image_alignment"] = max(worst["image_alignment"], err)

    for i in range(30):
        rng = np.random.default_rng(480 + i)
        n, c = int(rng.integers(2, 8)), int(rng.integers(2, 5))
        logits = rng.standard_normal((n, c))
        targets = rng.integers(0, c, n)
        _loss, grad = detection_loss(logits, targets)
        num = central_difference_grad(lambda x: detection_loss(x, targets)[0], logits.copy(), h)
        worst["detection"] = max(worst["detection"], relative_error(grad, num))

    ok = all(v < 1e-4 for v in worst.values())
    report(
        "4 (gradient suite)", ok,
        "rel errs: " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + " (tol 1e-4, 30 each)",
    )


# --------------------------------------------------------------------------
# criterion 5: closed-form identities
# --------------------------------------------------------------------------


def test_criterion_5_closed_forms():
    # contrastive = ln(C*K) under uniform similarity, C=3, K=4
    c, k, d, dq = 3, 4, 6, 5
    head = ProjectionHead.init(d, dq, Rng(0, ("acc5",)), levels=1)
    batch = np.tile(np.linspace(0.5, 1.5, dq), (c, k, 1))
    ref = np.tile(np.linspace(-1.0, 1.0, d), (c, k, 1))
    res = contrastive_loss(batch, np.ones((c, k), bool), ref, np.ones((c, k), bool), head)
    err_con = abs(res.loss - np.log(12))
    assert err_con <= 1e-9

    # image alignment: 0 under positive scaling, 2 under negation
    rng = np.random.default_rng(5)
    vfm = FeatureMap(data=rng.standard_normal((5, 5, d)), stride=8.0)
    head_id = ProjectionHead.init(d, d, Rng(1, ("acc5",)), levels=1)
    head_id.conv_w[0] = np.eye(d)
    head_id.conv_b[0] = np.zeros(d)
    scaled = FeatureMap(data=2.5 * vfm.data, stride=8.0)
    zero_loss = image_alignment_loss([scaled], vfm, head_id).loss
    negated = FeatureMap(data=-vfm.data, stride=8.0)
    two_loss = image_alignment_loss([negated], vfm, head_id).loss
    assert abs(zero_loss) <= 1e-12 and abs(two_loss - 2.0) <= 1e-12

    # EMA geometric closed form at n=50, alpha=0.999
    theta_t = {"w": np.array([2.0])}
    theta_s = {"w": np.array([-1.0])}
    for _ in range(50):
        ema_update(theta_t, theta_s, 0.999)
    want = -1.0 + 0.999**50 * 3.0
    err_ema = abs(theta_t["w"][0] - want)
    assert err_ema <= 1e-12

    report(
        "5 (closed forms)", True,
        f"ln(12) err {err_con:.1e} (tol 1e-9); align 0/2 exact; EMA err {err_ema:.1e} (tol 1e-12)",
    )


# --------------------------------------------------------------------------
# criterion 6: mining benchmark
# --------------------------------------------------------------------------


def test_criterion_6_mining_benchmark(tmp_path):
    rows_by_seed = {}
    runtimes = []
    for seed in SEEDS:
        t0 = time.time()
        index = generate_world(standard_world(seed), tmp_path / f"w{seed}")
        protos = extract_prototypes(index, rng=Rng(seed, ("protos",)))
        rows_by_seed[seed] = mining_benchmark(index, protos, seed=seed)["rows"]
        runtimes.append(time.time() - t0)
    ok = True
    detail = []
    for seed, rows in rows_by_seed.items():
        for row in rows:
            if row["mined_f1"] < row["fixed_f1"]:
                ok = False
                detail.append(f"seed{seed} tau={row['tau_low']}: {row['gain']:+.3f}")
            if row["tau_low"] in (0.1, 0.2) and row["gain"] < 0.05:
                ok = False
                detail.append(f"seed{seed} tau={row['tau_low']}: gain {row['gain']:+.3f} < 0.05")
    if max(runtimes) >= 60.0:
        ok = False
        detail.append(f"slowest seed {max(runtimes):.0f}s >= 60s")
    gains = [r["gain"] for rows in rows_by_seed.values() for r in rows]
    report(
        "6 (mining benchmark)", ok,
        detail and "; ".join(detail)
        or f"gains {min(gains):+.3f}..{max(gains):+.3f} over 5 seeds x 4 thresholds, "
        f"slowest seed {max(runtimes):.1f}s",
    )


# --------------------------------------------------------------------------
# criterion 7: ablation ordering full_vg >= vpm >= mt_semi on >= 4 of 5 seeds
# --------------------------------------------------------------------------


def test_criterion_7_ablation_ordering(ordering_runs):
    ordered = 0
    lines = []
    for seed in SEEDS:
        mt = ordering_runs[("mt_semi", seed)]["final"]
        vpm = ordering_runs[("vpm", seed)]["final"]
        full = ordering_runs[("full_vg", seed)]["final"]
        ok = full >= vpm >= mt
        ordered += ok
        lines.append(f"seed{seed}: {mt:.3f}/{vpm:.3f}/{full:.3f}{'' if ok else ' (!)'}")
    report("7 (ablation ordering)", ordered >= 4, f"{ordered}/5 seeds ordered; " + " ".join(lines))


# --------------------------------------------------------------------------
# criterion 8: stability - source_free collapses, labeled modes never
# --------------------------------------------------------------------------


def test_criterion_8_stability(ordering_runs, stability_runs):
    collapses = sum(stability_runs[("source_free", s)]["collapse"] for s in SEEDS)
    labeled_collapses = [
        (mode, s)
        for mode in ("mt_semi", "vpm", "full_vg")
        for s in SEEDS
        if stability_runs[(mode, s)]["collapse"]
    ]
    standard_collapses = [
        (mode, s)
        for mode in ("mt_semi", "vpm", "full_vg")
        for s in SEEDS
        if ordering_runs[(mode, s)]["collapse"]
    ]
    slowest = max(r["runtime"] for r in stability_runs.values())
    ok = collapses >= 4 and not labeled_collapses and not standard_collapses and slowest < 180
    report(
        "8 (stability)", ok,
        f"source_free collapsed on {collapses}/5 high-shift seeds; "
        f"labeled-mode collapses: {labeled_collapses or 'none'} (high-shift), "
        f"{standard_collapses or 'none'} (standard); slowest run {slowest:.0f}s < 180s",
    )


# --------------------------------------------------------------------------
# criterion 9: CLI pipeline determinism
# --------------------------------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path):
    cfg = WorldConfig(
        num_images=16, grid_h=10, grid_w=10, base_channels=4, vfm_channels=6,
        num_classes=2, objects_per_image=(1, 2), box_size_range=(3, 4),
        labeled_fraction=0.2, eval_fraction=0.2, seed=77,
    )
    world_json = tmp_path / "world.json"
    world_json.write_text(json.dumps(cfg.to_json()))

    def pipeline(root):
        root.mkdir()
        assert cli_main(["generate", "--world", str(world_json), "--out", str(root / "world")]) == 0
        assert cli_main([
            "extract-prototypes", "--index", str(root / "world" / "index.json"),
            "--k", "2", "--seed", "4", "--out", str(root / "protos.json"),
        ]) == 0
        assert cli_main([
            "mine", "--index", str(root / "world" / "index.json"),
            "--protos", str(root / "protos.json"), "--dynamic", "--seed", "4",
            "--out", str(root / "mined.json"), "--report", str(root / "report.json"),
        ]) == 0
        assert cli_main([
            "simulate", "--world", str(world_json), "--mode", "vpm", "--steps", "5",
            "--seed", "4", "--out", str(root / "runlog.jsonl"),
            "--work-dir", str(root / "work"),
        ]) == 0

    pipeline(tmp_path / "run_a")
    pipeline(tmp_path / "run_b")

    compared = 0
    for rel in sorted(
        p.relative_to(tmp_path / "run_a") for p in (tmp_path / "run_a").rglob("*") if p.is_file()
    ):
        a = (tmp_path / "run_a" / rel).read_bytes()
        b = (tmp_path / "run_b" / rel).read_bytes()
        assert a == b, f"artifact differs: {rel}"
        compared += 1
    report("9 (determinism)", compared > 10, f"{compared} artifacts byte-identical across reruns")
