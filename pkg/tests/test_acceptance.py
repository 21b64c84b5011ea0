"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict with the measured numbers.
The lines are printed at the end of the pytest run (see ``conftest.py``) and
also immediately when run with ``-s``.
"""
import time

import numpy as np
import pytest

from reidrefine import checks, evaluation, pipeline, proxy, refine, roi
from reidrefine.numgrid import make_rng
from reidrefine.refine import RefineConfig, lr_at

from conftest import ACCEPTANCE_SEEDS
from oracles import brute_force, dyadic_instance, pr_oracle, random_instance

VERDICTS: dict[int, str] = {}

ROI_TOL, ROI_STEP, ROI_CASES, ROI_SECONDS = 1e-3, 1e-3, 100, 60.0
CHAIN_TOL, CHAIN_CASES, CHAIN_SECONDS = 1e-2, 20, 120.0
CORNER_TOL, CORNER_BOXES = 1e-12, 1000
MINING_INSTANCES = 1000
IOU_GAIN, REFINE_SECONDS = 0.1, 600.0
EVAL_INSTANCES = 50


def verdict(n: int, ok: bool, text: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def test_criterion_1_roi_gradient_check():
    t0 = time.perf_counter()
    box, img = checks.roi_check(seed=0, cases=ROI_CASES, step=ROI_STEP)
    secs = time.perf_counter() - t0
    ok = (box.cases == img.cases == ROI_CASES and box.max_rel_error < ROI_TOL
          and img.max_rel_error < ROI_TOL and secs < ROI_SECONDS)
    verdict(1, ok, f"box grad {box.max_rel_error:.2e}, image grad {img.max_rel_error:.2e} "
                   f"(tol {ROI_TOL:g}, {ROI_CASES} cases, {secs:.1f}s < {ROI_SECONDS:.0f}s)")


def test_criterion_2_full_chain_gradient_check():
    t0 = time.perf_counter()
    rep = checks.chain_check(seed=0, cases=CHAIN_CASES, loss="cls+tri")
    secs = time.perf_counter() - t0
    ok = rep.cases == CHAIN_CASES and rep.max_rel_error < CHAIN_TOL and secs < CHAIN_SECONDS
    verdict(2, ok, f"cls+tri box grad {rep.max_rel_error:.2e} (tol {CHAIN_TOL:g}, {rep.cases} cases, "
                   f"{rep.redrawn} redrawn, {secs:.1f}s < {CHAIN_SECONDS:.0f}s)")


def test_criterion_3_affine_corner_exactness():
    rng = make_rng(3)
    worst = 0.0
    corners = roi.TargetGrid(2, 2, np.array([[-1.0, 1.0]] * 2), np.array([[-1.0, -1.0], [1.0, 1.0]]))
    for _ in range(CORNER_BOXES):
        m1, n1 = rng.uniform(-100, 400, size=2)
        b = roi.BBox(m1, n1, m1 + rng.uniform(2.5, 300), n1 + rng.uniform(2.5, 300))
        s = roi.map_grid(roi.affine_from_box(b), corners)
        worst = max(worst, abs(s.xs[0, 0] - b.m1), abs(s.ys[0, 0] - b.n1),
                    abs(s.xs[1, 1] - b.m2), abs(s.ys[1, 1] - b.n2))
    verdict(3, worst <= CORNER_TOL, f"max corner error {worst:.1e} over {CORNER_BOXES} boxes (tol {CORNER_TOL:g})")


def test_criterion_4_proxy_mining_oracle():
    rng = make_rng(4)
    mismatches = leaks = errors_agree = scored = skipped = 0
    for _ in range(MINING_INSTANCES):
        table, emb, ids, margin = dyadic_instance(rng, batch=int(rng.integers(1, 20)))
        negatives = proxy.NEG_TABLE if rng.random() < 0.8 else proxy.NEG_BATCH
        try:
            want = brute_force(table, emb, ids, margin, negatives)
        except proxy.NoNegativeError:
            try:
                proxy.mine_and_loss(table, emb, ids, margin, negatives)
            except proxy.NoNegativeError:
                errors_agree += 1
            else:
                mismatches += 1
            continue
        got = proxy.mine_and_loss(table, emb, ids, margin, negatives)
        if (got.loss, got.pos_slot, got.neg_slot, got.skipped) != want:
            mismatches += 1
        # cold-start exclusion: no selected slot is unfilled, and unfilled contents cannot matter
        for slot in got.pos_slot + got.neg_slot:
            if slot is not None and not table.filled[slot]:
                leaks += 1
        poisoned = table.copy()
        poisoned.entries[~poisoned.filled] = emb.mean(axis=0)  # as close as an unfilled slot could be
        again = proxy.mine_and_loss(poisoned, emb, ids, margin, negatives)
        if (again.loss, again.pos_slot, again.neg_slot) != (got.loss, got.pos_slot, got.neg_slot):
            leaks += 1
        scored += 1
        skipped += len(got.skipped)
    ok = mismatches == 0 and leaks == 0
    verdict(4, ok, f"{MINING_INSTANCES} instances: {mismatches} mismatches, {leaks} unfilled-slot leaks "
                   f"({scored} scored, {errors_agree} no-negative errors agreed, {skipped} cold-start anchors skipped)")


def _seed_mean(experiments, name, key):
    if key == "mean_iou":
        return float(np.mean([e.outcomes[name].mean_iou for e in experiments.experiments.values()]))
    return float(np.mean([e.outcomes[name].metrics[key] for e in experiments.experiments.values()]))


def test_criterion_5_refinement_improves_localization(experiments):
    assert tuple(experiments.experiments) == ACCEPTANCE_SEEDS
    secs = sum(experiments.seconds[(s, stage)] for s in ACCEPTANCE_SEEDS for stage in ("prepare", "cls+tri"))
    for exp in experiments.experiments.values():
        cfg = exp.cfg
        assert (cfg.n_scenes, cfg.n_ids, cfg.iterations, cfg.loss) == (64, 8, 2000, "cls+tri")
        assert (cfg.init_iou_lo, cfg.init_iou_hi) == (0.4, 0.7)
        truth = pipeline.gallery_truth(exp.sset)
        assert all(0.4 <= evaluation.iou(b, g) <= 0.7 for b, g in zip(exp.init.boxes, truth.boxes))
    iou0, iou1 = _seed_mean(experiments, "baseline", "mean_iou"), _seed_mean(experiments, "cls+tri", "mean_iou")
    r0, r1 = _seed_mean(experiments, "baseline", "rank1"), _seed_mean(experiments, "cls+tri", "rank1")
    m0, m1 = _seed_mean(experiments, "baseline", "map"), _seed_mean(experiments, "cls+tri", "map")
    ok = iou1 >= iou0 + IOU_GAIN and r1 > r0 and m1 > m0 and secs < REFINE_SECONDS
    verdict(5, ok, f"mean IoU {iou0:.3f} -> {iou1:.3f} (gain {iou1 - iou0:+.3f}, need {IOU_GAIN}), "
                   f"rank-1 {r0:.3f} -> {r1:.3f}, mAP {m0:.3f} -> {m1:.3f}, "
                   f"{len(ACCEPTANCE_SEEDS)} seeds in {secs:.0f}s < {REFINE_SECONDS:.0f}s")


def test_criterion_6_ablation_structure(experiments):
    base = _seed_mean(experiments, "baseline", "map")
    cls_, tri = _seed_mean(experiments, "cls", "map"), _seed_mean(experiments, "tri", "map")
    both = _seed_mean(experiments, "cls+tri", "map")
    ok = cls_ > base and tri > base
    verdict(6, ok, f"mAP baseline {base:.3f}, cls {cls_:.3f}, tri {tri:.3f} (cls+tri {both:.3f}, reported only)")


def test_criterion_7_evaluator_oracle():
    rng = make_rng(7)
    checked = mismatches = 0
    while checked < EVAL_INSTANCES:
        inst = random_instance(rng)
        if inst is None:
            continue
        result = evaluation.evaluate(*inst)
        aps, m_ap, cmc = pr_oracle(*inst)
        if ([q.ap_exact for q in result.queries] != aps or result.mean_ap != m_ap
                or result.cmc.tolist() != cmc):
            mismatches += 1
        checked += 1
    box = roi.BBox(0, 0, 10, 20)
    gt = {k: [(box, 1 if k == 0 else 2)] for k in range(3)}
    perfect = evaluation.evaluate([[0.0]], [1], [[0.1], [0.5], [0.9]], [0, 1, 2], [box] * 3, gt)
    gt2 = {0: [(box, 2)], 1: [(box, 1)]}
    second = evaluation.evaluate([[0.0]], [1], [[0.1], [0.5]], [0, 1], [box] * 2, gt2)
    hand = (perfect.queries[0].ap == 1.0 and perfect.rank(1) == 1.0
            and second.queries[0].ap == 0.5 and second.rank(1) == 0.0)
    verdict(7, mismatches == 0 and hand,
            f"{EVAL_INSTANCES} instances, {mismatches} AP/mAP/CMC mismatches vs PR enumeration; "
            f"hand examples AP=1 and AP=0.5 {'hold' if hand else 'FAIL'}")


def test_criterion_8_learning_rate_schedule():
    cfg = RefineConfig()
    ramp = [0, 50, 100, 150, 200, 250, 300, 350, 400, 450]
    ramp_ok = all(lr_at(i, cfg) == 5e-5 * i / 500 for i in ramp)
    ends = lr_at(0) == 0.0 and lr_at(500) == 5e-5 and lr_at(9_999) == 5e-5
    tail = all(lr_at(i) == 5e-6 for i in (10_001, 20_000, 40_000, 10**6))
    ok = ramp_ok and ends and tail
    verdict(8, ok, f"lr(0)={lr_at(0):g}, lr(500)={lr_at(500):g}, lr(>1e4)={lr_at(10_001):g}; "
                   f"linear ramp at {len(ramp)} points {'exact' if ramp_ok else 'WRONG'}")


def test_criterion_9_determinism(experiments, tmp_path):
    first = experiments.experiments[ACCEPTANCE_SEEDS[0]]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for d, exp in ((out_a, first), (out_b, None)):
        d.mkdir()
        if exp is None:
            # rerun the criterion-5 experiment from scratch with the same seed
            exp = pipeline.prepare(pipeline.RunConfig(seed=ACCEPTANCE_SEEDS[0]))
            boxes, record, _ = pipeline.refine_gallery(exp.sset, exp.net, exp.init, exp.cfg)
            pipeline.score(exp, "cls+tri", boxes, record)
        o = exp.outcomes["cls+tri"]
        pipeline.write_trace(d / "trace.csv", o.record)
        pipeline.write_json(d / "metrics.json", o.metrics)
    same_trace = (out_a / "trace.csv").read_bytes() == (out_b / "trace.csv").read_bytes()
    same_metrics = (out_a / "metrics.json").read_bytes() == (out_b / "metrics.json").read_bytes()
    verdict(9, same_trace and same_metrics,
            f"seed {ACCEPTANCE_SEEDS[0]} rerun: trace.csv {'identical' if same_trace else 'DIFFERS'}, "
            f"metrics.json {'identical' if same_metrics else 'DIFFERS'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
