"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
import torch

from _oracles import brute_iou, brute_match, central_diff, rel_err
from _toy import run_toy
from conftest import make_dataset
from istdkd import TAGS
from istdkd.bilevel import gn_coefficient, hypergradient_alpha, init_pseudo_masks, mask_quality, train
from istdkd.config import RunConfig
from istdkd.losses import LossWeights, inner_loss, kd_loss, outer_loss
from istdkd.masks import components
from istdkd.metrics import iou, match_targets, niou, pd_fa, report_from_predictions
from istdkd.nets import StudentNet, build_teacher
from istdkd.reweight import batch_weights
from istdkd.scam import ScamLayer, gated_scale, modulate
from istdkd.vfm import StubProvider, attention_stats, extract_tokens, tap_pool


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def test_criterion_1_formula_oracles(verdict):
    t0 = time.time()
    w = batch_weights(torch.tensor([0, 0, 1, 1]), torch.tensor([math.log(2), 0.0], dtype=torch.float64))
    hand = bool(np.allclose(w.numpy(), [4 / 3, 4 / 3, 2 / 3, 2 / 3], atol=1e-12))
    rng = np.random.default_rng(0)
    worst_mean = 0.0
    for _ in range(1000):
        k, b = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        alpha = torch.as_tensor(rng.normal(0, 3, k))
        w = batch_weights(torch.as_tensor(rng.integers(0, k, b)), alpha)
        worst_mean = max(worst_mean, abs(w.mean().item() - 1))
    worst_rho = 0.0
    exact_alpha = True
    for _ in range(200):
        n = int(rng.integers(1, 50))
        a, b = rng.normal(size=n), rng.normal(size=n) * rng.uniform(0.01, 10)
        brute = sum(x * y for x, y in zip(a, b)) / (sum(y * y for y in b) + 1e-8)
        worst_rho = max(worst_rho, abs(gn_coefficient(torch.as_tensor(a), torch.as_tensor(b)) - brute))
        ga, gi, eta, rho = rng.normal(size=4), rng.normal(size=4), float(rng.uniform(0, 1)), float(rng.normal())
        got = hypergradient_alpha(torch.as_tensor(ga), torch.as_tensor(gi), eta, rho).tolist()
        exact_alpha &= got == [float(x) + eta * rho * float(y) for x, y in zip(ga, gi)]
    dt = time.time() - t0
    ok = hand and worst_mean <= 1e-6 and worst_rho <= 1e-10 and exact_alpha and dt < 10
    verdict(1, ok, f"hand={hand} max|mean(w)-1|={worst_mean:.1e} max|rho err|={worst_rho:.1e} "
                   f"alpha exact={exact_alpha} {dt:.1f}s")
    assert ok


def test_criterion_2_bilevel_toy(verdict):
    t0 = time.time()
    lines, ok = [], True
    for seed in range(5):
        _, losses, cosines = run_toy(iters=50, seed=seed)
        dec = all(b < a for a, b in zip(losses, losses[1:]))
        frac = float(np.mean(np.array(cosines) > 0))
        ok &= dec and frac >= 0.9
        lines.append(f"seed{seed}: decreasing={dec} positive cosine={frac:.0%}")
    dt = time.time() - t0
    ok &= dt < 30
    verdict(2, ok, "; ".join(lines) + f" {dt:.1f}s")
    assert ok


def _fd_check(fn, inputs):
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    auto = torch.autograd.grad(fn(*leaves), leaves)
    num = central_diff(fn, [x.detach().clone() for x in inputs])
    return max(rel_err(a, n) for a, n in zip(auto, num))


def test_criterion_3_scam_identity_and_gradients(verdict):
    t0 = time.time()
    prov = StubProvider()
    bitwise = True
    for seed in range(3):
        torch.manual_seed(seed)
        student = StudentNet()
        teacher = build_teacher(student)
        with torch.no_grad():
            for layer in teacher.modulator.layers:
                layer.generator[-1].weight.zero_()
                layer.generator[-1].bias.zero_()
                layer.gate.zero_()
        img = np.random.default_rng(seed).random((64, 64))
        tok = torch.as_tensor(extract_tokens(img, prov).blocks, dtype=torch.float32)[None]
        x = torch.as_tensor(img, dtype=torch.float32)[None, None]
        bitwise &= torch.equal(teacher(x, tok)[0], student(x)[0])

    worst = {"modulate": 0.0, "affine_params": 0.0, "tap_pool": 0.0, "kd_loss": 0.0}
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
        f, raw, beta, u, wt = r(2, 4, 3, 3), r(2, 4), r(2, 4), r(4), r(2, 4, 3, 3)
        worst["modulate"] = max(worst["modulate"], _fd_check(
            lambda f, raw, beta, u: (wt * modulate(f, gated_scale(raw, u), beta)).sum(), [f, raw, beta, u]))

        torch.manual_seed(seed)
        layer = ScamLayer(0, 3, dim=5, hidden=4).double()
        for p in layer.parameters():
            torch.nn.init.normal_(p, std=0.7)
        names = [n for n, _ in layer.named_parameters()]
        gv, w1, w2 = r(2, 5), r(2, 3), r(2, 3)

        def aff(gv, *params):
            out = torch.func.functional_call(layer, dict(zip(names, params)), (gv,))
            return (w1 * out[0]).sum() + (w2 * out[1]).sum()

        worst["affine_params"] = max(worst["affine_params"],
                                     _fd_check(aff, [gv] + [p.detach() for p in layer.parameters()]))
        tokens, tw, c = r(6, 4), r(4), r(4)
        worst["tap_pool"] = max(worst["tap_pool"], _fd_check(
            lambda t, w: (c * tap_pool(t, w)[0]).sum() + tap_pool(t, w)[1][0], [tokens, tw]))
        worst["kd_loss"] = max(worst["kd_loss"], _fd_check(lambda a, b: kd_loss(a, b, 4.0),
                                                           [r(2, 4, 4) * 3, r(2, 4, 4) * 3]))
    dt = time.time() - t0
    ok = bitwise and max(worst.values()) < 1e-4 and dt < 60
    verdict(3, ok, f"bitwise identity={bitwise} " + " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" {dt:.1f}s")
    assert ok


def _directional(fn, params, v, h=1e-6):
    with torch.no_grad():
        for p, d in zip(params, v):
            p.add_(h * d)
        up = float(fn())
        for p, d in zip(params, v):
            p.sub_(2 * h * d)
        down = float(fn())
        for p, d in zip(params, v):
            p.add_(h * d)
    return (up - down) / (2 * h)


def test_criterion_4_detach_contract(verdict):
    torch.manual_seed(0)
    student = StudentNet((4, 8, 8)).double()
    teacher = build_teacher(student, hidden=8).double()
    # push the teacher well away from the student so both paths carry signal
    for layer in teacher.modulator.layers:
        torch.nn.init.normal_(layer.generator[-1].weight, std=1.0)
        torch.nn.init.normal_(layer.generator[-1].bias, std=1.0)
        torch.nn.init.constant_(layer.gate, 1.0)
    imgs = np.random.default_rng(0).random((2, 32, 32))
    prov = StubProvider()
    x = torch.as_tensor(imgs)[:, None]
    tok = torch.as_tensor(np.stack([extract_tokens(i, prov).blocks for i in imgs]))
    y = torch.zeros(2, 32, 32, dtype=torch.float64)
    y[:, 10:13, 10:13] = 1
    w = torch.tensor([0.7, 1.3], dtype=torch.float64)
    lw = LossWeights(lambda_in=0.5, lambda_out=1.0)
    named = sorted(student.named_parameters())
    theta = [p for _, p in named]
    phi = [p for _, p in sorted(teacher.named_parameters())]
    g = torch.Generator().manual_seed(1)
    # probe along the output head, which sits after every ReLU, so FD never straddles a kink
    v_theta = [torch.randn(p.shape, generator=g, dtype=p.dtype) * n.startswith("head.") for n, p in named]
    v_phi = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in phi]

    def l_in(z_s=None):
        z_t = teacher(x, tok)[0]
        return inner_loss(z_t, student(x)[0] if z_s is None else z_s, y, w, teacher.modulator.r_gate(), lw)[0]

    def l_out(z_t=None):
        return outer_loss(student(x)[0], teacher(x, tok)[0] if z_t is None else z_t, y, w, lw)[0]

    # L_in: theta-gradient must equal FD with the student branch frozen
    z_s0 = student(x)[0].detach()
    g_in = torch.autograd.grad(l_in(), theta)
    auto_in = sum(float((a * d).sum()) for a, d in zip(g_in, v_theta))
    fd_frozen = _directional(lambda: l_in(z_s0), theta, v_theta)
    fd_live = _directional(l_in, theta, v_theta)
    gap_in = abs(auto_in - fd_frozen)

    # L_out: no gradient reaches phi; theta-gradient equals FD with the teacher frozen
    z_t0 = teacher(x, tok)[0].detach()
    g_phi = torch.autograd.grad(l_out(), phi, allow_unused=True)
    phi_grad = max(0.0 if gp is None else float(gp.abs().max()) for gp in g_phi)
    fd_phi = abs(_directional(lambda: l_out(z_t0), phi, v_phi))
    g_out = torch.autograd.grad(l_out(), theta)
    auto_out = sum(float((a * d).sum()) for a, d in zip(g_out, v_theta))
    fd_frozen_t = _directional(lambda: l_out(z_t0), theta, v_theta)
    fd_live_t = _directional(l_out, theta, v_theta)
    gap_out = abs(auto_out - fd_frozen_t)

    ok = gap_in <= 1e-8 and gap_out <= 1e-8 and phi_grad <= 1e-8 and fd_phi <= 1e-8
    # the probes are sensitive: a live (undetached) path would shift them by 100x the tolerance
    sensitive = min(abs(fd_live - fd_frozen), abs(fd_live_t - fd_frozen_t)) > 1e-6
    ok &= sensitive
    verdict(4, ok, f"L_in student-path residual={gap_in:.1e} L_out teacher-path residual={gap_out:.1e} "
                   f"|dL_out/dphi| auto={phi_grad:.1e} fd={fd_phi:.1e} "
                   f"live-path shifts {abs(fd_live - fd_frozen):.1e}/{abs(fd_live_t - fd_frozen_t):.1e}")
    assert ok


def test_criterion_5_metrics_oracle(verdict):
    rng = np.random.default_rng(0)
    exact = True
    preds, gts = [], []
    for _ in range(200):
        p = rng.random((16, 16)) < rng.uniform(0.05, 0.5)
        gt = rng.random((16, 16)) < rng.uniform(0.05, 0.5)
        preds.append(p)
        gts.append(gt)
        exact &= iou(p, gt) == brute_iou(p, gt)
        exact &= match_targets(p, gt) == brute_match(p, gt)
    exact &= niou(preds, gts) == float(np.mean([brute_iou(p, g) for p, g in zip(preds, gts)]))
    tot = [brute_match(p, g) for p, g in zip(preds, gts)]
    pd, fa = pd_fa(preds, gts)
    exact &= pd == sum(t[1] for t in tot) / sum(t[0] for t in tot)
    exact &= fa == sum(t[2] for t in tot) / (200 * 256)

    ds = make_dataset(n_train=12, n_test=40, size=32, seed=5)
    samples = ds.subset("test")
    noisy = [s.gt_mask ^ (rng.random(s.gt_mask.shape) > 0.97) for s in samples]
    rep = report_from_predictions(noisy, samples)
    inter = sum(int((p & s.gt_mask).sum()) for p, s in zip(noisy, samples))
    union = sum(int((p | s.gt_mask).sum()) for p, s in zip(noisy, samples))
    counts = [brute_match(p, s.gt_mask) for p, s in zip(noisy, samples)]
    pooled = {
        "IoU": 100.0 * (inter / union),
        "nIoU": 100.0 * float(np.mean([brute_iou(p, s.gt_mask) for p, s in zip(noisy, samples)])),
        "Pd": 100.0 * (sum(c[1] for c in counts) / sum(c[0] for c in counts)),
        "Fa": 1e6 * (sum(c[2] for c in counts) / sum(s.gt_mask.size for s in samples)),
        "n": 40,
    }
    overall = rep.rows["Overall"]
    pooling = all(overall[k] == pytest.approx(pooled[k], rel=1e-12) for k in pooled)
    pooling &= sum(rep.rows[t]["n"] for t in TAGS) == 40
    ok = exact and pooling
    verdict(5, ok, f"200 random pairs exact={exact} pooling consistent={pooling}")
    assert ok


def test_criterion_6_attention_statistics(verdict):
    cases = {"uniform": ([0.25] * 4, 100.0, 4.0), "one-hot": ([0, 1, 0, 0], 0.0, 1.0),
             "half-uniform": ([0.5, 0.5, 0, 0], 50.0, 2.0)}
    exact = True
    for a, h_pct, effn in cases.values():
        h, e, _ = attention_stats(a)
        exact &= abs(100 * h - h_pct) < 1e-9 and abs(e - effn) < 1e-9
    rng = np.random.default_rng(0)
    bounds = True
    for _ in range(10_000):
        n = int(rng.integers(1, 200))
        a = rng.dirichlet(np.full(n, rng.uniform(0.05, 5)))
        h, e, pmax = attention_stats(a)
        bounds &= 0 <= h <= 1 and 1 <= e <= n and 1 / n - 1e-12 <= pmax <= 1
    ok = exact and bounds
    verdict(6, ok, f"cases exact={exact} bounds on 10000 vectors={bounds}")
    assert ok


def test_criterion_7_pseudo_mask_safety(verdict):
    ds = make_dataset(n_train=48, n_test=16, size=64, seed=7)
    violations = []
    checks = [0]

    def on_evolve(epoch, store):
        for sid, pts in store.points.items():
            m = store.masks[sid]
            checks[0] += 1
            if not all(m[p] for p in pts):
                violations.append((epoch, sid, "point lost"))
            for rows, _ in components(m):
                if rows.size > 0.01 * m.size:
                    violations.append((epoch, sid, f"component of {rows.size} px"))

    t0 = time.time()
    train(RunConfig(epochs=30, batch=4, seed=0), ds, on_evolve=on_evolve)
    ok = not violations and checks[0] == 30 * 48
    verdict(7, ok, f"{checks[0]} mask checks, {len(violations)} violations {time.time() - t0:.0f}s")
    assert ok, violations[:5]


def test_criterion_8_desk_benchmark(verdict):
    t0 = time.time()
    wins, gains, lines = 0, [], []
    for seed in (0, 1, 2):
        ds = make_dataset(n_train=160, n_test=40, size=64, seed=seed)
        pool = list(ds.split.train) + list(ds.split.val)
        start = mask_quality(init_pseudo_masks({s: ds.samples[s].points for s in pool}, (64, 64)), ds, pool)
        full = train(RunConfig(epochs=60, batch=4, seed=seed), ds)
        base = train(RunConfig(epochs=60, batch=4, seed=seed, use_vfm=False, use_val=False, use_reweight=False), ds)
        f_iou, b_iou = full.history[-1]["test_IoU"], base.history[-1]["test_IoU"]
        wins += f_iou >= b_iou
        gain = 100 * (full.history[-1]["mask_IoU_Salient"] - start["mask_IoU_Salient"])
        gains.append(gain)
        lines.append(f"seed{seed}: full {f_iou:.3f} vs base {b_iou:.3f}, Salient mask "
                     f"{start['mask_IoU_Salient']:.3f}->{full.history[-1]['mask_IoU_Salient']:.3f}")
    dt = time.time() - t0
    ok_dir, ok_mask, ok_time = wins >= 2, float(np.mean(gains)) >= 10, dt < 20 * 60
    ok = ok_dir and ok_mask and ok_time
    verdict(8, ok, f"wins {wins}/3 ({ok_dir}), mean Salient gain {np.mean(gains):+.1f} pts ({ok_mask}), "
                   f"{dt / 60:.1f} min ({ok_time}) | " + "; ".join(lines))
    assert ok


def test_criterion_9_schedule(verdict):
    ds = make_dataset(n_train=16, n_test=4, size=32)
    res = train(RunConfig(epochs=12, batch=4, k_c=2, bilevel_period=5, gn_steps=4, channels=[4, 8, 8], hidden=8), ds)
    got = [(r["epoch"], r["gn_step"]) for r in res.bilevel_log]
    want = [(e, k) for e in (5, 10) for k in (1, 2, 3, 4)]
    fired = [h["epoch"] for h in res.history if h["bilevel"]]
    ok = got == want and fired == [5, 10]
    verdict(9, ok, f"triggers at {fired}, {len(got)} GN rows")
    assert ok
