"""One-shot verification suites: finite-difference gradient checks for
every differentiable op plus the composed adaption head, and oracle
equivalence checks for the pure-numeric procedures (cascade filter,
metrics, schedule, optimizer). The oracle implementations here are
deliberately naive re-derivations, independent of the library code they
check."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adaption import AdaptionConfig, AdaptionModule
from .backbone import BackboneConfig
from .losses import (LossConfig, bce_loss, combined_mask_loss, dice_loss,
                     weighted_focal_loss)
from .metrics import kld, nss, sim
from .nn import MultiHeadAttention
from .postproc import PostprocConfig, postprocess
from .tensor import Tensor, grad_check
from .trainer import AdamWState, adamw_step, clip_gradients, lr_at

GRAD_SEEDS = 20


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _rand(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, shape))


def _grad_case(name, builder, tol, seeds=GRAD_SEEDS):
    worst = 0.0
    t0 = time.perf_counter()
    for s in range(seeds):
        rng = np.random.default_rng([997, s])
        f, point = builder(rng)
        worst = max(worst, grad_check(f, point))
    dt = time.perf_counter() - t0
    return CheckResult(name, worst <= tol, f"max rel err {worst:.3e} (tol {tol:.0e})", dt)


def gradient_suite() -> list[CheckResult]:
    """Central finite differences vs analytic gradients, 20 seeds per op."""
    checks = []

    def matmul22(rng):
        a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
        return (lambda a, b: T.tsum(T.matmul(a, b))), [a, b]

    def matmul33(rng):
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 2)
        return (lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b)))), [a, b]

    def matmul32(rng):
        a, w = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        return (lambda a, w: T.tsum(T.gelu(T.matmul(a, w)))), [a, w]

    def softmax_case(rng):
        x = _rand(rng, 3, 5)
        c = Tensor(rng.uniform(-1, 1, (3, 5)))
        return (lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), c))), [x]

    def layer_norm_case(rng):
        x, g, b = _rand(rng, 2, 3, 6), _rand(rng, 6), _rand(rng, 6)
        c = Tensor(rng.uniform(-1, 1, (2, 3, 6)))
        return (lambda x, g, b: T.tsum(T.mul(T.layer_norm(x, g, b), c))), [x, g, b]

    def pointwise(op):
        def build(rng):
            x = _rand(rng, 4, 5)
            c = Tensor(rng.uniform(-1, 1, (4, 5)))
            return (lambda x: T.tsum(T.mul(op(x), c))), [x]
        return build

    def pow_case(rng):
        x = Tensor(rng.uniform(0.1, 2.0, (4, 4)))
        return (lambda x: T.tsum(T.pow_const(x, 2.0))), [x]

    def tconv_case(rng):
        x, k = _rand(rng, 2, 3, 2, 2), _rand(rng, 3, 2, 2, 2)
        c = Tensor(rng.uniform(-1, 1, (2, 2, 4, 4)))
        return (lambda x, k: T.tsum(T.mul(T.transposed_conv2x2(x, k), c))), [x, k]

    def upsample_case(rng):
        x = _rand(rng, 2, 3, 3)
        c = Tensor(rng.uniform(-1, 1, (2, 6, 6)))
        return (lambda x: T.tsum(T.mul(T.upsample_nearest(x, 2), c))), [x]

    def attention_case(rng):
        att = MultiHeadAttention(8, 6, 2, rng)
        q, kv = _rand(rng, 2, 3, 8), _rand(rng, 2, 4, 6)
        c = Tensor(rng.uniform(-1, 1, (2, 3, 8)))
        point = [q, kv, att.wq.weight, att.wk.weight, att.wv.weight, att.wo.weight]
        return (lambda q, kv, *ws: T.tsum(T.mul(att(q, kv), c))), point

    def adaption_case(rng):
        cfg = BackboneConfig(d_sam=8, d_mm=8, image_size=16, patch_size=8,
                             n_text=3, j_taps=2, depth=2, heads=2, vocab_size=16)
        head = AdaptionModule(cfg, AdaptionConfig(heads=2, zero_init=False), rng)
        text = _rand(rng, 1, 3, 8)
        taps = [_rand(rng, 1, 4, 8) for _ in range(2)]
        c = Tensor(rng.uniform(-1, 1, (1, cfg.mask_channels, 8, 8)))
        point = [text, taps[0], taps[1], head.queries, head.fusion.logits]
        return (lambda text, t0, t1, q, fl: T.tsum(T.mul(head(text, [t0, t1]), c))), point

    def dice_case(rng):
        x = Tensor(rng.uniform(0.05, 0.95, (3, 3)))
        t = rng.integers(0, 2, (3, 3)).astype(float)
        return (lambda x: dice_loss(x, t)), [x]

    def bce_case(rng):
        x = _rand(rng, 3, 3)
        t = rng.uniform(0, 1, (3, 3))
        return (lambda x: bce_loss(x, t)), [x]

    def focal_case(rng):
        x = _rand(rng, 3, 3)
        t = rng.uniform(0, 1, (3, 3))
        cfg = LossConfig()
        return (lambda x: weighted_focal_loss(x, t, cfg)), [x]

    def combined_case(rng):
        x = _rand(rng, 3, 3)
        t = rng.integers(0, 2, (3, 3)).astype(float)
        cfg = LossConfig()
        return (lambda x: combined_mask_loss(x, t, cfg)), [x]

    checks.append(_grad_case("matmul 2d x 2d", matmul22, 1e-6))
    checks.append(_grad_case("matmul batched", matmul33, 1e-5))
    checks.append(_grad_case("matmul shared weight", matmul32, 1e-5))
    checks.append(_grad_case("softmax", softmax_case, 1e-5))
    checks.append(_grad_case("layer_norm", layer_norm_case, 1e-5))
    checks.append(_grad_case("gelu", pointwise(T.gelu), 1e-5))
    checks.append(_grad_case("sigmoid", pointwise(T.sigmoid), 1e-5))
    checks.append(_grad_case("softplus", pointwise(T.softplus), 1e-5))
    checks.append(_grad_case("exp", pointwise(T.exp), 1e-5))
    checks.append(_grad_case("pow_const", pow_case, 1e-5))
    checks.append(_grad_case("transposed_conv2x2", tconv_case, 1e-5))
    checks.append(_grad_case("upsample_nearest", upsample_case, 1e-5))
    checks.append(_grad_case("attention block", attention_case, 1e-4))
    checks.append(_grad_case("adaption head (composed)", adaption_case, 1e-4))
    checks.append(_grad_case("dice loss", dice_case, 1e-5))
    checks.append(_grad_case("bce loss", bce_case, 1e-5))
    checks.append(_grad_case("focal loss", focal_case, 1e-5))
    checks.append(_grad_case("combined mask loss", combined_case, 1e-5))
    return checks


# -- naive reference implementations --------------------------------------------


def naive_kld(pred, gt, eps=1e-10):
    p = np.asarray(pred, float).reshape(-1)
    g = np.asarray(gt, float).reshape(-1)
    p = p / p.sum()
    g = g / g.sum()
    total = 0.0
    for i in range(len(p)):
        total += g[i] * math.log(eps + g[i] / (eps + p[i]))
    return total


def naive_sim(pred, gt):
    p = np.asarray(pred, float).reshape(-1)
    g = np.asarray(gt, float).reshape(-1)
    p = p / p.sum()
    g = g / g.sum()
    return sum(min(p[i], g[i]) for i in range(len(p)))


def naive_nss(pred, gt):
    p = np.asarray(pred, float).reshape(-1)
    g = np.asarray(gt, float).reshape(-1)
    mu = sum(p) / len(p)
    var = sum((x - mu) ** 2 for x in p) / len(p)
    std = math.sqrt(var)
    if std == 0.0:
        return 0.0
    total = sum(((p[i] - mu) / std) * g[i] for i in range(len(p)))
    return total / sum(g)


def naive_postprocess(values, gamma, num_filtrations):
    out = [float(v) for v in np.asarray(values, float).reshape(-1)]
    t1 = gamma * max(out)
    t2 = 0.4 * t1
    t3 = 0.2 * t2
    if t1 > 0:
        out = [v if v >= t1 else v * v / t1 for v in out]
    if num_filtrations >= 2 and t2 > 0:
        out = [v if v >= t2 else v * v / t2 for v in out]
    if num_filtrations >= 3:
        out = [v if v >= t3 else 0.0 for v in out]
    return np.array(out).reshape(np.asarray(values).shape)


def naive_adamw(param, grads, lr, b1, b2, eps=1e-8, weight_decay=0.0):
    """Scalar-loop reference over a flat parameter vector."""
    p = [float(x) for x in param]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * (mh / (math.sqrt(vh) + eps) + weight_decay * p[i])
    return np.array(p)


# -- oracle suite ------------------------------------------------------------------


def _check(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        detail = fn()
        ok = True
    except AssertionError as exc:
        detail = str(exc) or "assertion failed"
        ok = False
    return CheckResult(name, ok, detail or "ok", time.perf_counter() - t0)


def oracle_suite(n_random: int = 1000) -> list[CheckResult]:
    checks = []

    def filter_hand_trace():
        got = postprocess(np.array([1.0, 0.4, 0.2, 0.05]), PostprocConfig(0.45, 3))
        want = naive_postprocess([1.0, 0.4, 0.2, 0.05], 0.45, 3)
        err = np.abs(got - want).max()
        assert err <= 1e-12, f"hand-trace mismatch {err:.2e}"
        return f"max abs err {err:.1e}"

    def filter_random():
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(n_random):
            m = rng.random((6, 6))
            got = postprocess(m, PostprocConfig(0.45, 3))
            want = naive_postprocess(m, 0.45, 3)
            worst = max(worst, float(np.abs(got - want).max()))
            assert (got <= m + 1e-15).all(), "not a contraction"
            assert got.max() == m.max(), "max not preserved"
        assert worst <= 1e-12, f"oracle mismatch {worst:.2e}"
        return f"{n_random} maps, max abs err {worst:.1e}"

    def metrics_random():
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(n_random):
            p = rng.random((5, 5)) + 1e-3
            g = rng.random((5, 5)) + 1e-3
            worst = max(worst,
                        abs(kld(p, g) - naive_kld(p, g)),
                        abs(sim(p, g) - naive_sim(p, g)),
                        abs(nss(p, g) - naive_nss(p, g)))
        assert worst <= 1e-9, f"metric oracle mismatch {worst:.2e}"
        return f"{n_random} pairs, max abs err {worst:.1e}"

    def metrics_closed_forms():
        two_point = np.array([0.5, 0.5, 0.0, 0.0]).reshape(2, 2)
        uniform = np.full((2, 2), 0.25)
        assert abs(kld(uniform, two_point) - math.log(2)) < 1e-6, "kld != ln 2"
        assert abs(sim(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])) - 0.5) < 1e-12
        one_hot = np.array([1.0, 0, 0, 0]).reshape(2, 2)
        assert abs(nss(one_hot, one_hot) - math.sqrt(3)) < 1e-9, "nss != sqrt(3)"
        rng = np.random.default_rng(3)
        m = rng.random((4, 4)) + 0.1
        g = rng.random((4, 4))
        assert abs(nss(2.5 * m + 0.7, g) - nss(m, g)) < 1e-9, "nss not affine invariant"
        return "ln2 / 0.5 / sqrt(3) / affine-invariance"

    def schedule_probes():
        base = 2e-5
        assert abs(lr_at(5, 31, base, 10) - base / 2) <= 1e-12 * base
        assert abs(lr_at(10, 31, base, 10) - base) <= 1e-12 * base
        assert abs(lr_at(20, 31, base, 10) - base / 2) <= 1e-12 * base
        assert lr_at(30, 31, base, 10) <= 1e-25
        return "warmup midpoint / decay start / decay midpoint"

    def adamw_vs_naive():
        rng = np.random.default_rng(5)
        p0 = rng.normal(size=6)
        grads = [rng.normal(size=6) for _ in range(100)]
        params = {"w": Tensor(p0.copy(), requires_grad=True)}
        state = AdamWState()
        for g in grads:
            adamw_step(params, {"w": g}, state, lr=1e-3)
        want = naive_adamw(p0, grads, 1e-3, 0.9, 0.999)
        err = np.abs(params["w"].data - want).max()
        assert err <= 1e-12, f"adamw mismatch {err:.2e}"
        return f"100 steps, max abs err {err:.1e}"

    def clip_property():
        rng = np.random.default_rng(9)
        for _ in range(200):
            grads = {f"p{i}": rng.normal(size=rng.integers(1, 6)) * rng.uniform(0, 4)
                     for i in range(3)}
            clipped = clip_gradients(grads, 3.0)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
            assert norm <= 3.0 + 1e-12, f"clipped norm {norm}"
        return "post-clip norm <= 3 on 200 random draws"

    checks.append(_check("cascade filter: hand trace", filter_hand_trace))
    checks.append(_check("cascade filter: random maps vs oracle", filter_random))
    checks.append(_check("metrics: random maps vs oracle", metrics_random))
    checks.append(_check("metrics: closed forms", metrics_closed_forms))
    checks.append(_check("lr schedule: probe points", schedule_probes))
    checks.append(_check("adamw vs naive reference", adamw_vs_naive))
    checks.append(_check("gradient clip property", clip_property))
    return checks


def run_suites(which: str = "all") -> list[CheckResult]:
    results = []
    if which in ("all", "grad"):
        results += gradient_suite()
    if which in ("all", "oracle"):
        results += oracle_suite()
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{status}  {r.name:<{width}}  {r.detail}  [{r.seconds:.2f}s]")
    n_fail = sum(not r.ok for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
