"""Acceptance suite: one summary line per criterion.

Run through pytest (the lines appear in the "acceptance criteria" section of
the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, randomize
from cstnet import functional as F
from cstnet import tensor as T
from cstnet.backbone import TokenMatrix, block_attention
from cstnet.checkpoint import apply_checkpoint, from_model, load_checkpoint, save_checkpoint, \
    transfer_to_small
from cstnet.cli import GRADCHECK_TOL, REFERENCE_FLOPS_G, REFERENCE_PARAMS_M
from cstnet.config import FULL, SMALL, TINY, TINY_SMALL
from cstnet.costs import count_flops, count_params, fusion_param_count
from cstnet.evaluation import (NPR_THRESHOLDS, TrackRecord, evaluate, normalized_precision_curve,
                               precision_curve, success_curve)
from cstnet.boxes import BoundingBox
from cstnet.fusion import JSCFM, SFM, FusionLayer
from cstnet.gradcheck import check_model
from cstnet.model import build_model
from cstnet.nn import MultiHeadSelfAttention
from cstnet.tensor import Tensor, precision

SEEDS = range(20)
README = Path(__file__).resolve().parents[1] / "README.md"


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def f64(factory, seed, scale=0.1):
    with precision(np.float64):
        m = factory().astype(np.float64)
    return randomize(m, seed, scale).eval()


def tm(x, stream, region, side):
    return TokenMatrix(Tensor(x), side, side, stream, region)


# -- 1. parameter accounting ------------------------------------------------------------

def test_criterion_1_parameter_accounting():
    start = time.perf_counter()
    full, small = build_model(FULL, initialize=False), build_model(SMALL, initialize=False)
    p_full, p_small = count_params(full).total_params, count_params(small).total_params
    dev_full = p_full / 1e6 / REFERENCE_PARAMS_M["full"] - 1
    dev_small = p_small / 1e6 / REFERENCE_PARAMS_M["small"] - 1
    identity = p_full - p_small == fusion_param_count(full)
    elapsed = time.perf_counter() - start
    ok = abs(dev_full) <= 0.05 and abs(dev_small) <= 0.05 and identity and elapsed < 60
    record(1, ok, f"full={p_full / 1e6:.2f}M ({dev_full:+.2%}) small={p_small / 1e6:.2f}M "
                  f"({dev_small:+.2%}) full-small==fusion:{identity} [{elapsed:.1f}s]")
    assert ok


# -- 2. FLOP accounting -----------------------------------------------------------------

def test_criterion_2_flop_accounting():
    start = time.perf_counter()
    reports = {name: count_flops(build_model(cfg, initialize=False), cfg)
               for name, cfg in (("full", FULL), ("small", SMALL))}
    elapsed = time.perf_counter() - start
    passing, parts = [], []
    for conv, attr in (("MAC", "total_macs"), ("2MAC", "total_flops_2mac")):
        devs = {n: getattr(r, attr) / 1e9 / REFERENCE_FLOPS_G[n] - 1 for n, r in reports.items()}
        parts.append(f"{conv}: full {devs['full']:+.2%} small {devs['small']:+.2%}")
        if all(abs(d) <= 0.10 for d in devs.values()):
            passing.append(conv)
    ok = bool(passing) and elapsed < 60
    record(2, ok, f"{'; '.join(parts)}; passing convention {passing or 'none'} [{elapsed:.1f}s]")
    assert ok


# -- 3. gradient correctness ------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_gradient_check():
    start = time.perf_counter()
    result = check_model(TINY, samples=100, seed=0)
    elapsed = time.perf_counter() - start
    coverage = result.coverage()
    required = ("SE", "LSA", "GIM", "LPU", "CAM", "CFN", "head")
    missing = [k for k in required if not coverage.get(k)]
    flat_ok = result.max_flat_abs_error < result.noise_floor or not result.of("flat")
    ok = (len(result.checked) == 100 and not missing and flat_ok
          and result.max_rel_error < GRADCHECK_TOL and elapsed < 300)
    record(3, ok, f"{len(result.checked)} checked, max rel error {result.max_rel_error:.2e} "
                  f"(< {GRADCHECK_TOL:g}), strata {dict(sorted(coverage.items()))}, "
                  f"missing {missing or 'none'} [{elapsed:.0f}s]")
    assert ok


# -- 4. oracle equivalence --------------------------------------------------------------

def _conv_errors(seed):
    rng = np.random.default_rng(seed)
    errs = []
    for k in (1, 3, 5, 7):
        x = rng.standard_normal((4, 9, 8))
        w, b = rng.standard_normal((6, 4, k, k)), rng.standard_normal(6)
        errs.append(np.abs(F.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
                           - oracles.conv_direct(x, w, b)).max())
        wd = rng.standard_normal((4, 1, k, k))
        errs.append(np.abs(F.conv2d(Tensor(x), Tensor(wd), groups=4).data
                           - oracles.conv_six_loops(x, wd, groups=4)).max())
    return max(errs)


def _mhsa_error(seed):
    with precision(np.float64):
        attn = randomize(MultiHeadSelfAttention(16, 4).astype(np.float64), seed)
    x = np.random.default_rng(seed).standard_normal((1, 10, 16))
    return np.abs(attn(Tensor(x)).data[0] - oracles.mhsa(attn, x[0])).max()


def _cam_error(seed):
    s = f64(lambda: SFM(TINY), seed, 0.2)
    rng = np.random.default_rng(seed)
    xr, xt = rng.standard_normal((2, 1, 16, TINY.dim))
    ar, at = s.cam(tm(xr, "rgb", "search", 4), tm(xt, "tir", "search", 4))
    er, et = oracles.cam(s, xr[0], xt[0], 4, 4)
    return max(np.abs(ar.data[0] - er).max(), np.abs(at.data[0] - et).max())


def _staged_error(seed):
    """JSCFM, SFM and the whole fusion layer against their stage-by-stage oracles."""
    rng = np.random.default_rng(seed)
    region, side = ("template", 4) if seed % 2 else ("search", 8)
    xr, xt, cr, ct = rng.standard_normal((4, 1, side * side, TINY.dim))
    errs = []
    j = f64(lambda: JSCFM(TINY), seed)
    gr, gt = j(tm(xr, "rgb", region, side), tm(xt, "tir", region, side))
    er, et = oracles.jscfm(j, xr[0], xt[0], side, side, region)
    errs += [np.abs(gr.tokens.data[0] - er).max(), np.abs(gt.tokens.data[0] - et).max()]
    s = f64(lambda: SFM(TINY), seed, 0.2)
    sr, st = s(tm(cr, "rgb", region, side), tm(ct, "tir", region, side),
               tm(xr, "rgb", region, side), tm(xt, "tir", region, side))
    er, et = oracles.sfm(s, cr[0], ct[0], xr[0], xt[0], side, side)
    errs += [np.abs(sr.tokens.data[0] - er).max(), np.abs(st.tokens.data[0] - et).max()]
    layer = f64(lambda: FusionLayer(TINY), seed)
    lr, lt = layer(region, tm(xr, "rgb", region, side), tm(xt, "tir", region, side))
    er, et = oracles.fusion_layer(layer, xr[0], xt[0], side, side, region)
    errs += [np.abs(lr.tokens.data[0] - er).max(), np.abs(lt.tokens.data[0] - et).max()]
    return max(errs)


@pytest.mark.slow
def test_criterion_4_oracle_equivalence():
    start = time.perf_counter()
    worst = {}
    for name, fn in (("conv", _conv_errors), ("mhsa", _mhsa_error), ("cross-attention", _cam_error),
                     ("staged fusion", _staged_error)):
        worst[name] = max(fn(seed) for seed in SEEDS)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(4, ok, f"max abs error over {len(SEEDS)} seeds each: {detail} (< 1e-5) [{elapsed:.0f}s]")
    assert ok


# -- 5. exact structural invariants -----------------------------------------------------

def _fusion_outputs(seed):
    layer = randomize(FusionLayer(TINY), 100 + seed, 0.1).eval()
    rng = np.random.default_rng(seed)
    side = TINY.search_grid
    xr, xt = rng.standard_normal((2, 1, side * side, TINY.dim)).astype(np.float32)
    a, b = tm(xr, "rgb", "search", side), tm(xt, "tir", "search", side)
    cr, ct = layer.jscfm(a, b)
    add_r, add_t = layer.sfm.cam(cr, ct)
    field = layer.sfm.cfn(cr.with_tokens(add_r + add_t, "joint")).data
    out_r, out_t = layer("search", a, b)
    return xr, xt, field, out_r.tokens.data, out_t.tokens.data


def _literal_difference_fraction():
    """Share of elements where (out_rgb - out_tir) == (in_rgb - in_tir) holds bit for bit."""
    hits = total = 0
    for seed in range(5):
        xr, xt, _, out_r, out_t = _fusion_outputs(seed)
        eq = (out_r - out_t) == (xr - xt)
        hits, total = hits + int(eq.sum()), total + eq.size
    return hits / total


def test_criterion_5_structural_invariants(tmp_path):
    checks = {}
    # one field added to both streams, bit for bit, and the difference exact up to rounding
    shared, bounded = True, True
    for seed in range(5):
        xr, xt, field, out_r, out_t = _fusion_outputs(seed)
        shared &= np.array_equal(out_r, field + xr) and np.array_equal(out_t, field + xt)
        d = (out_r.astype(np.float64) - out_t) - (xr.astype(np.float64) - xt)
        scale = np.maximum(np.abs(out_r), np.abs(out_t))
        bounded &= bool(np.all(np.abs(d) <= 2 * np.finfo(np.float32).eps * scale))
    checks["shared field (bitwise)"] = shared
    checks["difference within 2 ulp"] = bounded
    # split after concat returns the pieces
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 1, 16, TINY.dim)).astype(np.float32)
    r, t = T.split(T.concat([Tensor(a), Tensor(b)], axis=-1), 2, axis=-1)
    checks["split(concat) identity"] = np.array_equal(r.data, a) and np.array_equal(t.data, b)
    # transfer to the small variant
    full = build_model(TINY, seed=8)
    small = apply_checkpoint(transfer_to_small(from_model(full)), build_model(TINY_SMALL))
    z = rng.standard_normal((1, 3, TINY.template_side, TINY.template_side)).astype(np.float32)
    x = rng.standard_normal((1, 3, TINY.search_side, TINY.search_side)).astype(np.float32)
    o1, o2 = full(z, z * 0.5, x, x * 0.5, insertions=()), small(z, z * 0.5, x, x * 0.5)
    checks["transfer == empty insertion set"] = all(
        np.array_equal(getattr(o1, k).data, getattr(o2, k).data) for k in ("score", "offset", "size"))
    # checkpoint round trip
    path = save_checkpoint(full, tmp_path / "a.ckpt")
    again = load_checkpoint(path, build_model(TINY, seed=9))
    o3 = again(z, z * 0.5, x, x * 0.5)
    o4 = full(z, z * 0.5, x, x * 0.5)
    checks["checkpoint round trip"] = (
        save_checkpoint(again, tmp_path / "b.ckpt").read_bytes() == path.read_bytes()
        and all(np.array_equal(getattr(o3, k).data, getattr(o4, k).data)
                for k in ("score", "offset", "size")))
    literal = _literal_difference_fraction()
    structural_ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items())
    record(5, structural_ok and literal == 1.0,
           f"{detail}; literal float32 difference equality holds on {literal:.1%} of elements "
           f"(IEEE rounding of the two additions; see the decisions ledger)")
    assert structural_ok


@pytest.mark.xfail(strict=True, reason="float32 addition rounds differently for the two streams, "
                                       "so the difference is preserved only to within ~1 ulp")
def test_criterion_5_literal_difference_is_bit_exact():
    for seed in range(5):
        xr, xt, _, out_r, out_t = _fusion_outputs(seed)
        assert np.array_equal(out_r - out_t, xr - xt)


# -- 6. block structure of the joint attention --------------------------------------------

def test_criterion_6_block_attention():
    worst = 0.0
    n_z, n_x = TINY.num_template, TINY.num_search
    for seed in SEEDS:
        attn = randomize(MultiHeadSelfAttention(TINY.dim, TINY.heads), seed, 0.1)
        joint = np.random.default_rng(seed).standard_normal((1, n_x + n_z, TINY.dim))
        joint = Tensor(joint.astype(np.float32))
        worst = max(worst, float(np.abs(block_attention(attn, joint, n_x).data
                                        - attn.attention(joint).data).max()))
    ok = worst < 1e-6
    record(6, ok, f"max |monolithic - four-block| = {worst:.1e} over {len(SEEDS)} seeds, "
                  f"float32, {n_x}+{n_z} tokens (< 1e-6)")
    assert ok


# -- 7. overfit demonstration -------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_overfit(overfit_result):
    res = overfit_result
    ok = len(res.losses) == 200 and res.final <= 0.1 * res.initial and res.train_iou >= 0.5
    record(7, ok, f"200 steps seed 7: loss {res.initial:.3f} -> {res.final:.4f} "
                  f"(ratio {res.final / res.initial:.4f} <= 0.1), training-frame IoU "
                  f"{res.train_iou:.3f} (>= 0.5)")
    assert ok


# -- 8. metric protocol -------------------------------------------------------------------

def test_criterion_8_metric_protocol():
    rng = np.random.default_rng(0)
    gt = np.column_stack([rng.uniform(0, 300, (40, 2)), rng.uniform(5, 80, (40, 2))])
    boxes = [BoundingBox(*row) for row in gt]
    res = evaluate(TrackRecord(boxes), TrackRecord(boxes))
    self_ok = res["PR"].summary == res["NPR"].summary == res["SR"].summary == 1.0

    g3 = np.tile([50.0, 50.0, 20.0, 20.0], (3, 1))
    p3 = g3.copy()
    p3[1, 0] += 10
    p3[2, 1] += 30
    pr_ok = precision_curve(p3, g3).summary == 2 / 3
    g = np.tile([10.0, 20.0, 40.0, 16.0], (8, 1))
    p = g.copy()
    p[:, 0] += 20.0
    boundary = precision_curve(p, g)
    edge_ok = boundary.values[20] == 1.0 and boundary.values[19] == 0.0
    p[:, 0] = g[:, 0] + 10.0                            # normalized error 0.25
    npr = normalized_precision_curve(p, g)
    npr_ok = np.array_equal(npr.values, (NPR_THRESHOLDS >= 0.25).astype(float)) and npr.summary == 0.5
    half = success_curve(np.tile([0.0, 0.0, 1.5, 2.0], (5, 1)), np.tile([0.0, 0.0, 3.0, 2.0], (5, 1)))
    sr_ok = half.summary == 11 / 21
    ok = self_ok and pr_ok and edge_ok and npr_ok and sr_ok
    record(8, ok, f"self-evaluation all 1.0: {self_ok}; PR 2/3: {pr_ok}; 20 px boundary: {edge_ok}; "
                  f"NPR step 0.5: {npr_ok}; SR 11/21: {sr_ok} (exact equality)")
    assert ok


# -- 9. non-reproducibility statement ---------------------------------------------------------

def test_criterion_9_non_reproducibility_statement():
    text = README.read_text() if README.is_file() else ""
    needles = ("LasHeR", "71.5", "67.9", "57.2", "not reproduced")
    missing = [n for n in needles if n not in text]
    ok = not missing
    record(9, ok, "README states that the LasHeR benchmark scores (PR 71.5 / NPR 67.9 / SR 57.2) "
                  f"are not reproduced" + (f"; missing {missing}" if missing else ""))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-rA"]))
