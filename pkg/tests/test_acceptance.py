"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (shown even under
pytest's output capture) before asserting. Criteria 8-10 train real models and
take several minutes each; deselect them with ``-m "not slow"``.
"""
import csv
import itertools
import math
import statistics
import time

import numpy as np
import pytest
import torch

from treecount import kernels
from treecount.cli import main as cli_main
from treecount.data import downsample_density, generate_density_map, split_dataset
from treecount.decoder import perturb
from treecount.engine import TrainConfig, evaluate, fit, load_checkpoint
from treecount.losses import (consistency_loss, counting_loss, entropic_ot,
                              global_count_loss_labeled, global_count_loss_unlabeled,
                              ot_loss, ranking_loss, tv_loss)
from treecount.metrics import aggregate, game
from treecount.model import TreeCounter, preset
from treecount.synth import synth, synth_images

from test_losses import assert_grad_matches, grid_cost, lp_transport
from test_metrics import optimal_tp


@pytest.fixture
def report(capsys):
    """report(n, ok, detail, started) prints the verdict line, then asserts it."""
    def _report(n, ok, detail, started):
        took = time.perf_counter() - started
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'} ({took:.1f}s): {detail}")
        assert ok, detail
    return _report


# 1 -------------------------------------------------------------------------------------

def test_density_fidelity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_full = worst_down = 0.0
    for _ in range(100):
        h, w = (int(v) * 4 for v in rng.integers(8, 64, size=2))
        n = int(rng.integers(0, 60))
        pts = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        d = generate_density_map(pts, h, w)
        worst_full = max(worst_full, abs(d.count - n))
        worst_down = max(worst_down, abs(downsample_density(d, 4).count - d.count))
    took = time.perf_counter() - t0
    ok = worst_full <= 1e-5 and worst_down <= 1e-9 and took < 10
    report(1, ok, f"max |count-n| {worst_full:.2e} (<=1e-5), downsample drift "
                  f"{worst_down:.2e} (<=1e-9)", t0)


# 2 -------------------------------------------------------------------------------------

def test_architecture_shapes(report):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = preset("full")
    model = TreeCounter(cfg).eval()
    problems = []
    with torch.no_grad():
        for size in (256, 320):
            x = torch.randn(1, 3, size, size)
            pyr = model.encoder(x)
            want = [(1, c, size // s, size // s) for c, s in zip((128, 256, 512, 1024),
                                                                 (4, 8, 16, 32))]
            got = [tuple(f.shape) for f in pyr.features]
            if got != want:
                problems.append(f"{size}: features {got}")
            tok = [tuple(t.shape) for t in pyr.counter_tokens]
            if tok != [(1, 256), (1, 512), (1, 1024)]:
                problems.append(f"{size}: tokens {tok}")
            pred = model(x)
            if tuple(pred.maps.shape) != (1, 3, size // 4, size // 4):
                problems.append(f"{size}: maps {tuple(pred.maps.shape)}")
    took = time.perf_counter() - t0
    ok = not problems and took < 30
    report(2, ok, "; ".join(problems) or "full preset: S1..S4, 3 tokens, 3 maps at input/4 "
                                          "for 256 and 320", t0)


# 3 -------------------------------------------------------------------------------------

def test_loss_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    preds = torch.from_numpy(rng.uniform(0.2, 1.0, size=(1, 3, 4, 4)))
    gt = torch.from_numpy(rng.uniform(0.2, 1.0, size=(1, 4, 4)))
    signed = torch.from_numpy(np.random.default_rng(3).normal(size=(1, 3, 4, 4)))
    t = torch.tensor([[9.3, 11.7, 10.2]], dtype=torch.float64)
    cases = {
        "counting": (lambda x: counting_loss(x, gt), preds),
        "ot": (lambda x: ot_loss(x, gt, reg=1.0, iters=200, tol=0.0), preds),
        "tv": (lambda x: tv_loss(x, gt), preds),
        "ranking": (lambda x: ranking_loss(x, crops=2), signed),
        "consistency": (lambda x: consistency_loss(x, crops=2, detach_target=False), preds),
        "global labeled": (lambda x: global_count_loss_labeled(x, torch.tensor([10.0])), t),
        "global unlabeled": (lambda x: global_count_loss_unlabeled(x, detach_target=False), t),
    }
    failed = []
    for name, (f, x) in cases.items():
        try:
            assert_grad_matches(f, x.clone())
        except AssertionError as e:
            failed.append(f"{name}: {e}")
    took = time.perf_counter() - t0
    ok = not failed and took < 60
    report(3, ok, "; ".join(failed) or f"{len(cases)} losses within 1e-4 relative", t0)


# 4 -------------------------------------------------------------------------------------

def test_ot_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    cost = grid_cost(4, 4)
    worst, monotone = 0.0, True
    for _ in range(5):
        a, b = rng.random(16) + 0.05, rng.random(16) + 0.05
        a, b = a / a.sum(), b / b.sum()
        lp = lp_transport(a, b, cost)
        ta = torch.from_numpy(a).reshape(1, 4, 4)
        tb = torch.from_numpy(b).reshape(1, 4, 4)
        vals = [entropic_ot(ta, tb, f * cost.mean(), iters=20000, tol=1e-10).item()
                for f in (0.1, 0.03, 0.01)]
        worst = max(worst, abs(vals[-1] - lp) / lp)
        monotone &= all(abs(x - lp) >= abs(y - lp) for x, y in zip(vals, vals[1:]))
    took = time.perf_counter() - t0
    ok = worst <= 0.05 and monotone and took < 60
    report(4, ok, f"worst relative gap to LP {worst:.2%} (<=5%), monotone {monotone}", t0)


# 5 -------------------------------------------------------------------------------------

def test_loss_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    rank_max = 0.0
    for _ in range(50):
        rank_max = max(rank_max, ranking_loss(torch.from_numpy(rng.random((2, 3, 16, 16)))).item())
    same = torch.from_numpy(rng.random((2, 1, 16, 16))).expand(2, 3, 16, 16)
    consis = consistency_loss(same).item()
    gt = torch.from_numpy(rng.random((2, 16, 16)) + 0.01)
    pred = gt[:, None].expand(2, 3, 16, 16)
    reg = 10.0
    lc, ltv = counting_loss(pred, gt).item(), tv_loss(pred, gt).item()
    lot = ot_loss(pred, gt, reg=reg).item()
    # each identical pair costs at most 2*reg*ln(n) above the exact (zero) transport
    bound = 3 * 2 * reg * math.log(256)
    took = time.perf_counter() - t0
    ok = rank_max == 0 and consis == 0 and lc == 0 and ltv == 0 and 0 <= lot <= bound \
        and took < 10
    report(5, ok, f"ranking {rank_max}, consistency {consis}, L_c {lc}, L_tv {ltv}, "
                  f"L_ot offset {lot:.3f} (bound {bound:.1f})", t0)


# 6 -------------------------------------------------------------------------------------

def test_perturbation_contracts(report):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    p1_ok = p3_ok = eval_ok = True
    fracs = []
    for i in range(1000):
        x = torch.randn(2, 16, 8, 8, generator=g) * torch.rand(1, generator=g) * 10
        y1 = perturb(x, "P1", seed=i)
        p1_ok &= bool(((y1 - x).abs() <= 0.3 * x.abs() + 1e-6).all())
        y2 = perturb(x.abs() + 1e-3, "P2", seed=i)
        masked = (y2 == 0).all(dim=1)
        fracs.extend(masked.flatten(1).float().mean(1).tolist())
        y3 = perturb(x.abs() + 1e-3, "P3", seed=i, dropout_rate=0.3)
        zero = (y3 == 0).flatten(2)
        p3_ok &= bool((zero.all(-1) | ~zero.any(-1)).all())
        for k in ("P1", "P2", "P3"):
            eval_ok &= perturb(x, k, training=False) is x
    p2_ok = min(fracs) >= 0.10 and max(fracs) <= 0.30
    took = time.perf_counter() - t0
    ok = p1_ok and p2_ok and p3_ok and eval_ok and took < 30
    report(6, ok, f"P1 bound {p1_ok}, P2 fraction in [{min(fracs):.3f}, {max(fracs):.3f}], "
                  f"P3 whole channels {p3_ok}, eval identity {eval_ok}", t0)


# 7 -------------------------------------------------------------------------------------

def test_metrics_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    ims = synth_images(50, 64, (0, 12), seed=21)
    est, gts, pts = [], [], []
    for im in ims:
        g = downsample_density(generate_density_map(im.points, 64, 64), 4).values
        noisy = np.clip(g * rng.uniform(0.6, 1.4) + rng.normal(0, 0.003, g.shape), 0, None)
        est.append(noisy)
        gts.append(g)
        pts.append(im.points)
    rep = aggregate(est, gts, pts)
    g0_ok = rep.E_G0 == rep.E_MAE
    mono_ok = all(all(game(e, g, L) <= game(e, g, L + 1) + 1e-12 for L in range(3))
                  for e, g in zip(est, gts))
    worst, cases = 0, 0
    for n_p, n_g in itertools.product(range(6), repeat=2):
        for _ in range(20):
            peaks, gt = rng.uniform(0, 6, (n_p, 2)), rng.uniform(0, 6, (n_g, 2))
            worst = max(worst, optimal_tp(peaks, gt, 2.0) - len(kernels.greedy_match(peaks, gt, 2.0)))
            cases += 1
    took = time.perf_counter() - t0
    ok = g0_ok and mono_ok and worst <= 1 and took < 30
    report(7, ok, f"E_G0 == E_MAE {g0_ok}, GAME monotone per image {mono_ok}, greedy vs optimal "
                  f"worst TP gap {worst} over {cases} cases", t0)


# 8 -------------------------------------------------------------------------------------

OVERFIT = dict(preset="desk", crop=256, batch_size=8, learning_rate=1e-3, max_steps=200,
               val_fraction=0.0, seed=0, perturb_labeled=False)


@pytest.mark.slow
def test_overfit(report, tmp_path):
    t0 = time.perf_counter()
    ims = synth_images(8, 256, (5, 40), seed=0)
    mean_count = float(np.mean([im.count for im in ims]))
    cfg = TrainConfig(**OVERFIT)
    ck = fit(cfg, ims, split_dataset([im.id for im in ims], 1.0, 0), tmp_path, final_eval=ims)
    logged = ck.meta["final_eval"]
    reloaded = evaluate(load_checkpoint(ck.path), ims).summary()
    took = time.perf_counter() - t0
    same = reloaded == logged
    ok = logged["E_MAE"] < 0.05 * mean_count and same and took < 600
    report(8, ok, f"training E_MAE {logged['E_MAE']:.3f} (< {0.05 * mean_count:.3f}), reload "
                  f"identical {same}", t0)


# 9 -------------------------------------------------------------------------------------

SEMI = dict(preset="desk", crop=128, batch_size=6, learning_rate=1e-3, max_steps=300,
            val_fraction=0.0, labeled_fraction=0.1, perturb_labeled=False)


@pytest.mark.slow
def test_semi_supervised_benefit(report, tmp_path):
    t0 = time.perf_counter()
    train = synth_images(60, 128, (3, 12), seed=100)
    test = synth_images(20, 128, (3, 12), seed=200)
    maes = {0.0: [], 1.0: []}
    for seed in (0, 1, 2):
        split = split_dataset([im.id for im in train], 0.1, seed)
        for lam in maes:
            cfg = TrainConfig(**SEMI, seed=seed, lam=lam)
            ck = fit(cfg, train, split, tmp_path / f"s{seed}_l{lam:g}")
            maes[lam].append(evaluate(ck, test).E_MAE)
    med = {lam: statistics.median(v) for lam, v in maes.items()}
    took = time.perf_counter() - t0
    ok = med[1.0] <= med[0.0] and took < 45 * 60
    detail = ", ".join(f"lambda={lam:g} " + "/".join(f"{v:.3f}" for v in maes[lam])
                       for lam in maes)
    report(9, ok, f"median test E_MAE lambda=1 {med[1.0]:.3f} <= lambda=0 {med[0.0]:.3f}; "
                  f"per seed {detail}", t0)


# 10 ------------------------------------------------------------------------------------

ABLATE_CFG = """\
preset=desk
crop=128
batch_size=6
learning_rate=1e-3
max_steps=300
val_fraction=0
labeled_fraction=0.3
perturb_labeled=false
"""


@pytest.mark.slow
def test_ablation_plumbing(report, tmp_path):
    t0 = time.perf_counter()
    synth(tmp_path / "train", 30, 128, (3, 12), seed=300)
    synth(tmp_path / "test", 20, 128, (3, 12), seed=400)
    cfg = tmp_path / "ablate.cfg"
    cfg.write_text(ABLATE_CFG)
    switches = ["w/o LTC", "w/o LTR", "w/o GTC", "w/ L2"]
    argv = ["ablate", "--config", str(cfg), "--manifest", str(tmp_path / "train" / "manifest.csv"),
            "--eval-manifest", str(tmp_path / "test" / "manifest.csv"),
            "--out", str(tmp_path / "abl"), "--seed", "0", "--baseline"]
    for s in switches:
        argv += ["--switch", s]
    rc = cli_main(argv)
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv"))) if rc == 0 else []
    by = {r["variant"]: r for r in rows}
    took = time.perf_counter() - t0
    complete = rc == 0 and all(s in by for s in switches) and "full" in by
    comparable = complete and len({(r["seed"], r["labeled_fraction"], r["N"]) for r in rows}) == 1
    f1_ok = complete and float(by["w/ L2"]["E_F1"]) <= float(by["full"]["E_F1"])
    ok = complete and comparable and f1_ok and took < 40 * 60
    f1s = ", ".join(f"{r['variant']} {float(r['E_F1']):.2f}" for r in rows)
    report(10, ok, f"rc {rc}, {len(rows) - 1 if rows else 0} switch rows + full, comparable "
                   f"{comparable}, F1: {f1s}", t0)
