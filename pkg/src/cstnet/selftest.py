"""Quick invariant suite behind ``cstnet selftest``.

Each check is a closed-form property (identities, symmetries, boundary
values) that must hold exactly or to float tolerance; together they run in a
few seconds on the tiny preset.
"""
from __future__ import annotations

import tempfile
import warnings
from pathlib import Path
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .backbone import TokenMatrix, add_positional, joint_forward
from .boxes import BoundingBox, iou
from .checkpoint import Checkpoint, from_model, load_checkpoint, save_checkpoint, transfer_to_small
from .config import ModelConfig
from .costs import count_params, fusion_param_count
from .evaluation import evaluate
from .fusion import GIM, SEGate, FusionLayer
from .head import HeadOutputs, decode_box, fuse_search_outputs
from .losses import focal_loss, wiou_boxes
from .model import build_model
from .tensor import Tape, Tensor

CHECKS: list[tuple[str, Callable]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn
    return register


def _rng(seed):
    return np.random.default_rng(seed)


@check("matmul identity")
def _matmul(cfg, seed):
    b = Tensor(_rng(seed).standard_normal((3, 4)))
    return np.array_equal(T.matmul(Tensor(np.eye(3)), b).data, b.data)


@check("conv2d identity and zero kernels")
def _conv(cfg, seed):
    x = Tensor(_rng(seed).standard_normal((1, 6, 6)))
    same = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data
    zero = F.conv2d(x, Tensor(np.zeros((1, 1, 3, 3)))).data
    return np.array_equal(same, x.data) and not zero.any()


@check("softmax single column and equal logits")
def _softmax(cfg, seed):
    one = F.softmax_rows(Tensor(_rng(seed).standard_normal((5, 1)))).data
    flat = F.softmax_rows(Tensor(np.full((1, 4), 3.0))).data
    return np.all(one == 1) and np.allclose(flat, 0.25, atol=0, rtol=1e-12)


@check("backward of sum and sum of squares")
def _backward(cfg, seed):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    g = tape.backward(loss)[x]
    y = Tensor(_rng(seed).standard_normal((2, 3)), requires_grad=True)
    with Tape() as tape:
        s = y.sum()
    return np.array_equal(g, [2.0, 4.0]) and np.all(tape.backward(s)[y] == 1)


@check("layer norm zero mean, unit variance, shift invariance")
def _layer_norm(cfg, seed):
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    y = F.layer_norm(x, one, zero).data
    shifted = F.layer_norm(Tensor(x.data + 7.5), one, zero).data
    return (abs(y.mean()) < 1e-6 and abs(y.var() - 1) < 1e-5
            and np.allclose(y, shifted, atol=1e-12))


@check("activation anchors and relu idempotence")
def _activations(cfg, seed):
    x = Tensor(_rng(seed).standard_normal(16))
    r = T.relu(x).data
    return (T.gelu(Tensor(np.zeros(1))).item() == 0 and T.relu(Tensor(np.array([-1.0]))).item() == 0
            and T.sigmoid(Tensor(np.zeros(1))).item() == 0.5
            and np.array_equal(T.relu(Tensor(r)).data, r))


@check("adaptive average pool of equal tokens")
def _pool(cfg, seed):
    v = _rng(seed).standard_normal(5)
    x = Tensor(np.tile(v, (1, 7, 1)))
    return np.allclose(F.adaptive_avg_pool(x).data[0, 0], v, atol=1e-15)


@check("patch embedding token counts and constant images")
def _patch_embed(cfg, seed):
    model = build_model(cfg, seed)
    pe = model.backbone.patch_embed
    z = pe(np.zeros((1, 3, cfg.template_side, cfg.template_side)))
    x = pe(np.full((1, 3, cfg.search_side, cfg.search_side), 0.3))
    rows = x.data[0]
    return (z.shape[1] == cfg.num_template and x.shape[1] == cfg.num_search
            and np.all(rows == rows[0]))


@check("positional embedding identity cases")
def _positional(cfg, seed):
    tok = Tensor(_rng(seed).standard_normal((1, 4, 3)))
    emb = Tensor(_rng(seed + 1).standard_normal((1, 4, 3)))
    return (np.array_equal(add_positional(tok, Tensor(np.zeros((1, 4, 3)))).data, tok.data)
            and np.array_equal(add_positional(Tensor(np.zeros((1, 4, 3))), emb).data, emb.data))


@check("small variant: identical modalities give identical streams")
def _small_symmetry(cfg, seed):
    model = build_model(cfg.as_small(), seed)
    rng = _rng(seed)
    z = model.backbone.embed(rng.standard_normal((1, 3, cfg.template_side, cfg.template_side)), "template")
    x = model.backbone.embed(rng.standard_normal((1, 3, cfg.search_side, cfg.search_side)), "search")
    h_r, h_t = joint_forward(model.backbone, (z, x), (z, x))
    return np.array_equal(h_r.data, h_t.data)


@check("SE gate with zero MLP halves its input")
def _se(cfg, seed):
    se = SEGate(cfg.dim, cfg.se_ratio)
    x = Tensor(_rng(seed).standard_normal((1, 5, cfg.dim)).astype(np.float32))
    return np.array_equal(se(x).data, 0.5 * x.data)


@check("GIM with zero MLP is the identity")
def _gim(cfg, seed):
    gim = GIM(cfg.dim, cfg.gim_hidden)
    a = Tensor(_rng(seed).standard_normal((1, 4, cfg.dim)).astype(np.float32))
    b = Tensor(_rng(seed + 1).standard_normal((1, 4, cfg.dim)).astype(np.float32))
    out_a, out_b = gim(a, b)
    return np.array_equal(out_a.data, a.data) and np.array_equal(out_b.data, b.data)


@check("fusion layer adds one shared field to both streams")
def _difference(cfg, seed):
    model = build_model(cfg, seed)
    layer = next(iter(model.fusion.layers.values()))
    g = cfg.template_grid
    rng = _rng(seed)
    xr = TokenMatrix(Tensor(rng.standard_normal((1, g * g, cfg.dim)).astype(np.float32)), g, g,
                     "rgb", "template")
    xt = TokenMatrix(Tensor(rng.standard_normal((1, g * g, cfg.dim)).astype(np.float32)), g, g,
                     "tir", "template")
    cr, ct = layer.jscfm(xr, xt)
    add_r, add_t = layer.sfm.cam(cr, ct)
    adj = layer.sfm.cfn(cr.with_tokens(add_r + add_t, "joint")).data
    out_r, out_t = layer.sfm(cr, ct, xr, xt)
    return (np.array_equal(out_r.tokens.data, adj + xr.tokens.data)
            and np.array_equal(out_t.tokens.data, adj + xt.tokens.data))


@check("all-zero fusion layer returns its inputs")
def _zero_fusion(cfg, seed):
    layer = FusionLayer(cfg)
    g = cfg.template_grid
    rng = _rng(seed)
    xr = TokenMatrix(Tensor(rng.standard_normal((1, g * g, cfg.dim)).astype(np.float32)), g, g,
                     "rgb", "template")
    xt = TokenMatrix(Tensor(rng.standard_normal((1, g * g, cfg.dim)).astype(np.float32)), g, g,
                     "tir", "template")
    for _, p in layer.named_parameters():
        p.data[...] = 0
    out_r, out_t = layer("template", xr, xt)
    return np.array_equal(out_r.tokens.data, xr.tokens.data) and \
        np.array_equal(out_t.tokens.data, xt.tokens.data)


@check("search-feature sum is commutative")
def _fuse_outputs(cfg, seed):
    a = Tensor(_rng(seed).standard_normal((1, 4, 3)))
    b = Tensor(_rng(seed + 1).standard_normal((1, 4, 3)))
    return np.array_equal(fuse_search_outputs(a, b).data, fuse_search_outputs(b, a).data)


@check("decode picks cell (0, 0) on a uniform score map")
def _decode_tie(cfg, seed):
    S = cfg.search_grid
    h = HeadOutputs(Tensor(np.full((1, 1, S, S), 0.5)), Tensor(np.zeros((1, 2, S, S))),
                    Tensor(np.full((1, 2, S, S), 0.25)), Tensor(np.zeros((1, 2, S, S))))
    box, conf = decode_box(h, cfg.search_side)
    return box.cx == 0 and box.cy == 0 and conf == 0.5


@check("perfect predictions give near-zero losses")
def _perfect_losses(cfg, seed):
    gt = np.zeros((1, 5, 5))
    gt[0, 2, 3] = 1
    box = BoundingBox(3.0, 4.0, 10.0, 6.0)
    return focal_loss(Tensor(gt.copy()), gt).item() < 1e-5 and wiou_boxes(box, box) == 0.0


@check("IoU anchors")
def _iou(cfg, seed):
    a, b = BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 2, 2)
    return (iou(a, a) == 1.0 and iou(a, BoundingBox(5, 5, 1, 1)) == 0.0
            and abs(iou(a, b) - 1 / 7) < 1e-15)


@check("self-evaluation scores exactly 1")
def _self_eval(cfg, seed):
    rng = _rng(seed)
    gt = [BoundingBox(*rng.uniform(0, 50, 2), *rng.uniform(5, 20, 2)) for _ in range(10)]
    return all(c.summary == 1.0 for c in evaluate(gt, gt).values())


@check("model build is deterministic and small has no fusion parameters")
def _build(cfg, seed):
    a, b = build_model(cfg, seed), build_model(cfg, seed)
    same = all(np.array_equal(p.data, q.data)
               for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()))
    small = build_model(cfg.as_small(), seed)
    no_fusion = not any("fusion" in n for n, _ in small.named_parameters())
    gap = count_params(a).total_params - count_params(small).total_params == fusion_param_count(a)
    return same and no_fusion and gap


@check("checkpoint round trip and transfer idempotence")
def _checkpoint(cfg, seed):
    model = build_model(cfg, seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        other = load_checkpoint(path, build_model(cfg, seed + 1))
        save_checkpoint(other, path)
        same = path.read_bytes() == blob
    full = from_model(model)
    once = transfer_to_small(full)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        twice = transfer_to_small(once)
    return same and isinstance(once, Checkpoint) and once.to_bytes() == twice.to_bytes()


def run_all(cfg: ModelConfig, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run every check; a raised exception counts as a failure with its message."""
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = bool(fn(cfg, seed)), ""
        except Exception as exc:  # reported, not raised: the suite always completes
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
