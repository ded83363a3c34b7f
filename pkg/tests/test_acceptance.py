"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The desk experiment (criteria 5 to 8) trains the desk preset from scratch once
per session; expect roughly twelve minutes on one CPU core.
"""

import time
import zlib

import numpy as np
import pytest

from aerojepa import numerics as nx
from aerojepa.cli import main as cli_main
from aerojepa.config import defaults
from aerojepa.experiment import run_desk
from aerojepa.geometry import fps
from aerojepa.io import load_checkpoint, save_checkpoint
from aerojepa.losses import latent_loss, recon_loss, sigreg_loss, sigreg_null_threshold, sigreg_statistic
from aerojepa.model import AeroJEPANet, ModelConfig
from aerojepa.numerics import Tensor, check_gradients
from aerojepa.optimize import SmoothProblem, TrustRegion, mahalanobis, retrieve_nearest, sqp
from aerojepa.probes import ridge_solve, standardization
from aerojepa.synthgen import Conditions, DesignParams, make_case
from aerojepa.training import METRIC_NAMES, case_predictor, evaluate, metric_report


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return say


@pytest.fixture(scope="module")
def desk():
    return run_desk(defaults("desk"))


# -- 1. gradient integrity -----------------------------------------------------------------------------
OPS = {
    "exp": lambda a, b: nx.exp(a * 0.3), "log": lambda a, b: nx.log(b), "sqrt": lambda a, b: nx.sqrt(b),
    "tanh": lambda a, b: nx.tanh(a), "sin": lambda a, b: nx.sin(a), "cos": lambda a, b: nx.cos(a),
    "gelu": lambda a, b: nx.gelu(a), "softplus": lambda a, b: nx.softplus(a),
    "power": lambda a, b: nx.power(b, 2.5), "layer_norm": lambda a, b: nx.layer_norm(a),
    "softmax": lambda a, b: nx.softmax(a, axis=-1), "log_softmax": lambda a, b: nx.log_softmax(a),
    "max": lambda a, b: nx.max_(a, axis=1), "relu": lambda a, b: nx.relu(a + 0.05),
    "mean": lambda a, b: nx.mean(a, axis=0), "add": nx.add, "sub": nx.sub, "mul": nx.mul, "div": nx.div,
    "maximum": nx.maximum, "matmul": lambda a, b: nx.matmul(a, nx.transpose(b)),
    "concat": lambda a, b: nx.concat([a, b], axis=0), "stack": lambda a, b: nx.stack([a, b], axis=1),
    "gather": lambda a, b: nx.gather_rows(nx.reshape(a, (1, 3, 4)), np.array([[[0, 2], [2, 2]]])),
}


def test_criterion_1_gradient_integrity(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, op in OPS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
        w = rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape)
        errs = check_gradients(lambda: (op(a, b) * w).sum(), {"a": a, "b": b})
        worst[name] = max(errs.values())

    cfg = ModelConfig(n_tokens=4, token_dim=8, heads=2, encoder_depth=1, predictor_depth=1, decoder_depth=1,
                      decoder_hidden=(8,), fourier_bands=2, tokenize_neighbors=4, attn_neighbors=3, cond_hidden=4)
    net = AeroJEPANet(cfg, seed=0)
    rng = np.random.default_rng(0)
    for p in net.parameters().values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    ctx = rng.random((2, 16, 2))
    tx, tv = rng.random((2, 16, 2)), rng.normal(size=(2, 16, 1))
    qx, qv = rng.random((2, 16, 2)), rng.normal(size=(2, 16, 1))
    cond = np.array([[0.05, 0.0], [0.2, 0.3]])

    def chain():
        zc, cc = net.context_tokens(ctx)
        zt, _ = net.target_tokens(tx, tv)
        zp = net.predicted_tokens(zc, cc, cond)
        return (latent_loss(zp, zt) + recon_loss(net.decoded(zp, qx), qv)
                + 0.01 * sigreg_loss(zc.mean(axis=1), 8, seed=1))

    errs = check_gradients(chain, net.parameters())
    worst["chain"] = max(errs.values())
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 120
    verdict(1, ok, f"max rel err {worst[top]:.2e} ({top}), {len(OPS)} ops + full chain, {elapsed:.1f}s")
    assert ok


# -- 2. oracle equivalence -----------------------------------------------------------------------------
def _brute_fps(pts, k, start):
    sel = [start]
    while len(sel) < k:
        best, best_d = None, -1.0
        for c in range(len(pts)):
            if c in sel:
                continue
            d = min(((pts[c] - pts[s]) ** 2).sum() for s in sel)
            if d > best_d:
                best, best_d = c, d
        sel.append(best)
    return sel


def _gd_ridge(Zs, yc, lam):
    H = Zs.T @ Zs + lam * np.eye(Zs.shape[1])
    eig = np.linalg.eigvalsh(H)
    step = 2.0 / (eig[0] + eig[-1])
    w = np.zeros(Zs.shape[1])
    for _ in range(200_000):
        g = H @ w - Zs.T @ yc
        if np.abs(g).max() < 1e-14:
            break
        w -= step * g
    return w


def test_criterion_2_oracle_equivalence(verdict):
    rng = np.random.default_rng(2)
    fps_ok = True
    for trial in range(100):
        n = int(rng.integers(2, 65))
        k = int(rng.integers(1, n + 1))
        pts = rng.integers(0, 4, size=(n, 2)).astype(float) if trial % 2 else rng.random((n, 2))
        got = fps(pts, k, seed=trial)
        fps_ok &= got.tolist() == _brute_fps(pts, k, int(got[0]))

    ridge_err = 0.0
    for lam in (1e-4, 1.0, 100.0):
        Z = rng.normal(size=(80, 6)) * rng.uniform(0.5, 3.0, 6)
        y = Z @ rng.normal(size=6) + 0.3 * rng.normal(size=80)
        mu, sigma, active = standardization(Z)
        Zs, yc = (Z - mu) / sigma, y - y.mean()
        ridge_err = max(ridge_err, np.abs(ridge_solve(Zs, yc, lam, active) - _gd_ridge(Zs, yc, lam)).max())

    maha_err = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        A = r.normal(size=(5, 5))
        reg = TrustRegion(r.normal(size=5), A @ A.T + 0.5 * np.eye(5), 10.0)
        z = r.normal(size=5)
        _, g = mahalanobis(z, reg, return_grad=True)
        h = 1e-5
        fd = np.array([(mahalanobis(z + h * e, reg) - mahalanobis(z - h * e, reg)) / (2 * h) for e in np.eye(5)])
        maha_err = max(maha_err, np.abs(fd - g).max() / max(1.0, np.abs(g).max()))

    retr_ok = True
    for trial in range(200):
        n = int(rng.integers(1, 40))
        X = rng.integers(0, 4, size=(n, 2)).astype(float)
        ids = rng.permutation(1000)[:n]
        x = rng.integers(0, 4, size=2) + rng.choice([0.0, 0.5])
        std = X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        best_id, best_d = None, np.inf
        for i in range(n):
            dist = np.sqrt(sum(((X[i, j] - x[j]) / std[j]) ** 2 for j in range(2)))
            if dist < best_d or (dist == best_d and ids[i] < best_id):
                best_id, best_d = ids[i], dist
        retr_ok &= retrieve_nearest(x, X, ids)[0] == best_id

    truth = [rng.normal(size=n) for n in (50, 77, 128)]
    pred = [t + 0.3 * rng.normal(size=t.shape) for t in truth]
    rep = metric_report([p[:, None] for p in pred], [t[:, None] for t in truth])
    metric_err = 0.0
    for p, t, i in zip(pred, truth, range(3)):
        se = ae = t2 = t1 = gmax = 0.0
        for a, b in zip(p, t):
            se, ae, t2, t1, gmax = se + (a - b) ** 2, ae + abs(a - b), t2 + b * b, t1 + abs(b), max(gmax, abs(b))
        n = len(t)
        ref = {"rel_l2": np.sqrt(se / t2), "rel_l1": ae / t1, "rmse": np.sqrt(se / n), "mae": ae / n,
               "rmse_gtmax": np.sqrt(se / n) / gmax, "mae_gtmax": ae / n / gmax}
        for name in METRIC_NAMES:
            metric_err = max(metric_err, abs(rep.per_case[name][i, 0] - ref[name]))

    ok = fps_ok and ridge_err <= 1e-8 and maha_err <= 1e-8 and retr_ok and metric_err <= 1e-12
    verdict(2, ok, f"fps {'exact' if fps_ok else 'MISMATCH'} (100 trials); ridge {ridge_err:.1e}; "
                   f"mahalanobis grad {maha_err:.1e}; retrieval {'exact' if retr_ok else 'MISMATCH'}; "
                   f"metrics {metric_err:.1e}")
    assert ok


# -- 3. SIGReg calibration -----------------------------------------------------------------------------
def test_criterion_3_sigreg_calibration(verdict):
    thr = sigreg_null_threshold(10_000, 16, n_projections=64, trials=100, seed=11)
    gauss = sigreg_statistic(np.random.default_rng(123).standard_normal((10_000, 16)), 64, seed=5)
    collapsed = sigreg_statistic(np.tile(np.random.default_rng(4).normal(size=16), (10_000, 1)), 64, seed=5)
    steps = np.linspace(0.0, 1.0, 21)
    curves = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((256, 16))
        c = np.tile(rng.normal(size=16), (256, 1))
        curves.append([sigreg_statistic((1 - s) * c + s * g, 64, seed=seed) for s in steps])
    down = int(np.sum(np.diff(np.mean(curves, axis=0)) < 0))
    ok = gauss < thr and collapsed >= 10 * thr and down >= 18
    verdict(3, ok, f"gaussian {gauss:.3g} < null95 {thr:.3g}; collapsed {collapsed / thr:.3g}x; "
                   f"{down}/20 decreasing steps")
    assert ok


# -- 4. decoder consistency ----------------------------------------------------------------------------
class _Counting:
    def __init__(self, net):
        self.net, self.counts = net, {"encode_context": 0, "predict": 0}

    def __getattr__(self, name):
        attr = getattr(self.net, name)
        if name in self.counts:
            def wrapped(*a, **k):
                self.counts[name] += 1
                return attr(*a, **k)
            return wrapped
        return attr


def test_criterion_4_decoder_consistency(verdict):
    net = AeroJEPANet(ModelConfig(), seed=0)
    rng = np.random.default_rng(0)
    for p in net.decoder.parameters().values():
        p.data = p.data + 0.05 * rng.normal(size=p.shape)
    case = make_case(DesignParams(0.12, 0.03), Conditions(0.1), 512)
    zp = case_predictor(net, case, 256)
    q = case.field.coords
    full = net.decode(zp, q)
    single = np.concatenate([net.decode(zp, q[i:i + 1]) for i in range(len(q))])
    diff = float(np.abs(full - single).max())
    cases = [make_case(DesignParams(t, 0.02), Conditions(0.05), 256, case_id=i) for i, t in enumerate((0.1, 0.2, 0.15))]
    counted = _Counting(net)
    evaluate(counted, cases, [256, 512, 1024])
    once = counted.counts == {"encode_context": 3, "predict": 3}
    ok = diff <= 1e-12 and once
    verdict(4, ok, f"max |batched - one-at-a-time| {diff:.1e}; encode/predict calls {counted.counts} "
                   f"for 3 cases x 3 resolutions")
    assert ok


# -- 5 to 8. desk experiment ---------------------------------------------------------------------------
def test_criterion_5_desk_experiment(desk, verdict):
    rel = float(desk.report.mean("rel_l2")[0])
    a_pred = desk.probe_r2("predicted->alpha", "alpha")
    a_ctx = desk.probe_r2("context->alpha", "alpha")
    design = {k: desk.probe_r2("context->design", k) for k in ("thickness", "camber")}
    cl = desk.probe_r2("predicted->coeffs", "cl")
    minutes = desk.timings["total"] / 60
    ok = (rel <= 0.15 and a_pred >= 0.9 and a_ctx <= 0.2 and min(design.values()) >= 0.8 and cl >= 0.85
          and minutes < 30)
    verdict(5, ok, f"test Rel L2 {rel:.4f}; R2(alpha|z_pred) {a_pred:.3f}; R2(alpha|z_ctx) {a_ctx:.3f}; "
                   f"design R2 thickness {design['thickness']:.3f} camber {design['camber']:.3f}; "
                   f"C_L R2 {cl:.3f}; {minutes:.1f} min")
    assert ok


def test_criterion_6_latent_lab(desk, verdict):
    S, numeric = desk.closed.S, desk.numeric
    err = float(np.abs(S - numeric).max())
    dominant = desk.closed.diagonal_dominant()
    ok = err <= 1e-8 and dominant
    verdict(6, ok, f"max |closed - numeric| {err:.1e}; mean |diag| {np.abs(desk.closed.diagonal).mean():.3f} "
                   f"vs mean |off| {np.abs(desk.closed.off_diagonal).mean():.3f}")
    assert ok


def _kkt_problems():
    """Three problems with known solutions; returns the worst distance to the analytic optimum."""
    worst = 0.0
    d, tau = 4, 9.0
    r = TrustRegion(np.array([0.3, -0.2, 1.0, 0.0]), np.eye(d), tau)

    def ball(z):
        m, gm = mahalanobis(z, r, return_grad=True)
        return -z[0], -np.eye(d)[0], np.array([m - tau]), gm[None]

    res = sqp(SmoothProblem(d, ball), r.mu.copy())
    worst = max(worst, np.abs(res.x - (r.mu + 3.0 * np.eye(d)[0])).max())
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a, g = rng.normal(size=5), rng.normal(size=5)
        b = float(g @ a) - 1.0
        res = sqp(SmoothProblem(5, lambda x: (0.5 * np.sum((x - a) ** 2), x - a, np.array([g @ x - b]), g[None])),
                  np.zeros(5))
        worst = max(worst, np.abs(res.x - (a - (g @ a - b) / (g @ g) * g)).max())
    # box corner: minimise -(x + y) on [0, 1]^2
    res = sqp(SmoothProblem(2, lambda x: (-(x[0] + x[1]), -np.ones(2),
                                          np.concatenate([x - 1.0, -x]), np.vstack([np.eye(2), -np.eye(2)]))),
              np.array([0.2, 0.7]))
    return max(worst, np.abs(res.x - 1.0).max())


def test_criterion_7_optimizer(desk, verdict):
    kkt = _kkt_problems()
    o = desk.opt
    r = o.result
    resid = max(r.residuals.values())
    ld_gap = abs(o.nearest_ld_analytic - r.lift_to_drag) / r.lift_to_drag
    feasible = [x for x in r.restarts if x.max_violation <= 1e-6]
    best = min(feasible, key=lambda x: x.f)
    monotone = all(after <= before + 1e-12 for x in r.restarts for before, after in x.merit_pairs)
    ok = (kkt <= 1e-5 and r.n_converged_near_best >= 6 and resid <= 1e-6 and monotone
          and best.kkt_residual <= 1e-4 and r.lift_to_drag >= o.envelope.ld_p95 and ld_gap <= 0.2)
    verdict(7, ok, f"analytic problems max err {kkt:.1e}; merit monotone {monotone}; "
                   f"KKT residual at z* {best.kkt_residual:.1e}; "
                   f"restarts near best {r.n_converged_near_best}/{len(r.restarts)}; "
                   f"max residual {resid:.1e}; probed L/D {r.lift_to_drag:.2f} vs train p95 {o.envelope.ld_p95:.2f}; "
                   f"retrieved analytic L/D {o.nearest_ld_analytic:.2f} ({100 * ld_gap:.1f}% off)")
    assert ok


def test_criterion_8_force_parity(desk, verdict):
    corr = desk.parity.correlation
    ok = corr >= 0.95
    verdict(8, ok, f"corr(integrated decoded C_L, analytic C_L) = {corr:.4f} on {len(desk.parity.case_ids)} test cases")
    assert ok


# -- 9. reproducibility --------------------------------------------------------------------------------
SMALL = """\
data.n_cases = 40
data.resolution = 96
eval.resolutions = 96, 192
train.epochs = 2
train.n_context = 48
train.n_target = 48
train.n_query = 48
model.n_tokens = 8
model.token_dim = 8
model.encoder_depth = 1
model.predictor_depth = 1
optimize.restarts = 2
"""


def _run_all(root, cfg):
    common = ["--config", str(cfg), "--seed", "3"]
    ck, lat, prb = root / "t" / "checkpoint.ajpa", root / "l" / "latents.ajpa", root / "p" / "probes.ajpa"
    steps = [
        ["gen", "--out", root / "d"],
        ["train", "--data", root / "d", "--out", root / "t"],
        ["eval", "--data", root / "d", "--checkpoint", ck, "--out", root / "e"],
        ["latents", "--data", root / "d", "--checkpoint", ck, "--out", root / "l"],
        ["probe", "--latents", lat, "--out", root / "p"],
        ["walk", "--latents", lat, "--probes", prb, "--out", root / "w"],
        ["interp", "--data", root / "d", "--checkpoint", ck, "--out", root / "i"],
        ["optimize", "--data", root / "d", "--checkpoint", ck, "--latents", lat, "--probes", prb,
         "--out", root / "o"],
    ]
    codes = [cli_main([s[0]] + common + [str(a) for a in s[1:]]) for s in steps]
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_9_reproducibility(desk, verdict, tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    c1, f1 = _run_all(tmp_path / "a", cfg)
    c2, f2 = _run_all(tmp_path / "b", cfg)
    differ = sorted(k for k in f1 if f1.get(k) != f2.get(k)) + sorted(set(f2) - set(f1))
    save_checkpoint(tmp_path / "desk.ajpa", desk.checkpoint)
    back = load_checkpoint(tmp_path / "desk.ajpa")
    same_params = all(back.params[k].tobytes() == v.tobytes() for k, v in desk.checkpoint.params.items())
    test = [c for c in desk.cases if c.case_id in set(desk.manifest.splits["test"])][:3]
    n_ctx = defaults("desk")["train.n_context"]
    a = [desk.net.decode(case_predictor(desk.net, c, n_ctx), c.field.coords) for c in test]
    b_net = back.build()
    b = [b_net.decode(case_predictor(b_net, c, n_ctx), c.field.coords) for c in test]
    same_out = all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    ok = all(c == 0 for c in c1 + c2) and not differ and same_params and same_out
    verdict(9, ok, f"{len(f1)} CLI output files over 8 verbs, {len(differ)} differ between reruns; "
                   f"checkpoint round-trip params {'identical' if same_params else 'DIFFER'}, "
                   f"decoded fields {'identical' if same_out else 'DIFFER'}")
    assert ok
