"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary (see
conftest.py) so they appear in the saved test log.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

from glab import attack, cli, fl, imaging, models, sprites
from glab import functional as F
from glab.attack import AttackConfig
from glab.autodiff import Tensor, grad
from oracles import canny_reference, central_difference, rel_err

RESULTS = []


def report(number, ok, detail, seconds, limit=None):
    timing = f"{seconds:.1f}s" + (f" (limit {limit:.0f}s)" if limit else "")
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail} | {timing}"
    RESULTS.append(line)
    print(line)
    return ok


# -- 1. autodiff -------------------------------------------------------------------

def _prim_cases():
    conv = lambda s, p: lambda a, b: (F.conv2d(a, b, s, p) ** 2).sum()  # noqa: E731
    return [
        ("exp", lambda a: a.exp().sum(), [(3, 4)]),
        ("log", lambda a: (a * a + 1.0).log().sum(), [(3, 4)]),
        ("sqrt", lambda a: (a * a + 0.5).sqrt().sum(), [(3, 4)]),
        ("abs", lambda a: (a.abs() * a).sum(), [(3, 4)]),
        ("relu", lambda a: (a.relu() * a).sum(), [(3, 4)]),
        ("sigmoid", lambda a: (a.sigmoid() * a).sum(), [(3, 4)]),
        ("pow", lambda a: (a ** 3).sum(), [(3, 4)]),
        ("mean", lambda a: (a.mean(axis=0) ** 2).sum(), [(3, 4)]),
        ("index", lambda a: (a[1:, ::2] ** 2).sum(), [(3, 4)]),
        ("reshape", lambda a: (a.reshape(-1)[:5] ** 2).sum(), [(3, 4)]),
        ("logsumexp", lambda a: F.logsumexp(a).sum(), [(3, 4)]),
        ("add", lambda a, b: ((a + b) ** 2).sum(), [(3, 4), (3, 4)]),
        ("mul", lambda a, b: (a * b * a).sum(), [(3, 4), (3, 4)]),
        ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3, 4), (3, 4)]),
        ("matmul", lambda a, b: ((a @ b.T) ** 2).sum(), [(3, 4), (2, 4)]),
        ("concat", lambda a, b: (F.concat([a, b], axis=1) ** 3).sum(), [(3, 4), (3, 2)]),
        ("conv_s1p1", conv(1, 1), [(1, 2, 6, 6), (3, 2, 3, 3)]),
        ("conv_s2p1", conv(2, 1), [(1, 2, 6, 6), (2, 2, 4, 4)]),
        ("avgpool", lambda a: (F.avgpool2d(a, 2) ** 2).sum(), [(1, 2, 4, 4)]),
        ("linear", lambda a, w, b: (F.linear(a, w, b) ** 2).sum(), [(2, 5), (3, 5), (3,)]),
        ("cross_entropy", lambda a: F.cross_entropy(a, [2]), [(1, 5)]),
        ("multi_hot_bce", lambda a: F.multi_hot_bce(a, [0, 3]), [(1, 5)]),
        ("cosine", lambda a, b: 1.0 - F.cosine_similarity(a.reshape(-1), b.reshape(-1)), [(3, 4), (3, 4)]),
        ("batchnorm", lambda a, g, b: (F.batchnorm_inference(a, np.zeros(2), np.ones(2) * 1.5, g, b) ** 2).sum(),
         [(1, 2, 3, 3), (2,), (2,)]),
    ]


def _prim_err(fn, arrays):
    worst = 0.0
    for k in range(len(arrays)):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        (g,) = grad(fn(*ts), [ts[k]])

        def f(v, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(v)
            return fn(*args).item()

        worst = max(worst, rel_err(g.data, central_difference(f, arrays[k], h=1e-5)))
    return worst


def _cnn_err(seed, loss_kind):
    """Full MicroCNN client loss: tape gradients of every parameter and of the
    input against central differences on a seeded sample of coordinates."""
    rng = np.random.default_rng(seed)
    model = models.build_micro_cnn(seed=seed)
    x = rng.uniform(0.05, 0.95, size=model.input_shape)
    labels = [int(rng.integers(8))] if loss_kind == "ce" else sorted(rng.choice(8, 2, replace=False).tolist())
    base = {**model.parameters(), "input": x}

    def loss(values):
        """Loss and the ReLU on/off pattern (a stencil is only a valid oracle
        when both of its points share one pattern)."""
        params = {n: Tensor(values[n]) for n in model.parameters()}
        h = Tensor(values["input"][None])
        pattern = []
        for layer in model.layers:
            if layer.kind == "relu":
                pattern.append(h.data > 0)
            h = layer.forward(h, params)
        return fl.sample_loss(h, labels, loss_kind).item(), np.concatenate([p.ravel() for p in pattern])

    params = model.param_tensors(requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    names = list(params)
    tape = grad(fl.sample_loss(model.forward(xt, params), labels, loss_kind), [params[n] for n in names] + [xt])
    tape = dict(zip(names + ["input"], [t.data for t in tape]))
    got, want, skipped = [], [], 0
    for name, value in base.items():
        flat = value.reshape(-1)
        picked = 0
        for i in rng.permutation(flat.size):
            if picked == min(flat.size, 24):
                break
            vals = {k: v.copy() for k, v in base.items()}
            vals[name].reshape(-1)[i] = flat[i] + 1e-5
            fp, pp = loss(vals)
            vals[name].reshape(-1)[i] = flat[i] - 1e-5
            fm, pm = loss(vals)
            if not np.array_equal(pp, pm):
                skipped += 1  # the stencil straddles a ReLU kink
                continue
            picked += 1
            got.append(tape[name].reshape(-1)[i])
            want.append((fp - fm) / 2e-5)
    return rel_err(np.array(got), np.array(want)), skipped


def test_criterion_1_autodiff_finite_differences():
    start = time.perf_counter()
    prims = _prim_cases()
    errs = []
    for case in range(80):
        name, fn, shapes = prims[case % len(prims)]
        rng = np.random.default_rng(case)
        arrays = [rng.normal(size=s) for s in shapes]
        for a in arrays:
            a[np.abs(a) < 0.05] = 0.3  # keep abs/relu kinks off the stencil
        errs.append((name, _prim_err(fn, arrays)))
    kinks = 0
    for case in range(20):
        kind = "ce" if case % 2 == 0 else "bce"
        err, skipped = _cnn_err(100 + case, kind)
        errs.append(("micro_cnn_" + kind, err))
        kinks += skipped
    seconds = time.perf_counter() - start
    worst = max(errs, key=lambda t: t[1])
    ok = len(errs) == 100 and worst[1] < 1e-4 and seconds < 120
    report(1, ok, f"{len(errs)} cases, worst rel. err {worst[1]:.2e} ({worst[0]}); "
                  f"{kinks} MicroCNN stencils straddling a ReLU kink resampled", seconds, 120)
    assert ok


# -- 2. single-label inference --------------------------------------------------------

def test_criterion_2_single_label_inference():
    start = time.perf_counter()
    model = models.build_micro_cnn(seed=0)
    rng = np.random.default_rng(2)
    correct = 0
    for _ in range(200):
        x = rng.random(model.input_shape)
        label = int(rng.integers(model.class_count))
        correct += attack.infer_single_label(fl.client_step(model, x, label)).labels == (label,)
    seconds = time.perf_counter() - start
    ok = correct == 200 and seconds < 60
    report(2, ok, f"{correct}/200 labels recovered", seconds, 60)
    assert ok


# -- 3. multi-label inference -----------------------------------------------------------

def test_criterion_3_multi_label_inference():
    start = time.perf_counter()
    model = models.build_micro_cnn(seed=0)
    aux = sprites.generate_sprites(sprites.SpriteConfig(count=300, mode="multi"), 30)
    held = sprites.generate_sprites(sprites.SpriteConfig(count=100, mode="multi"), 31)
    aux_caps = [fl.client_step(model, x, s, "bce") for x, s in zip(aux.images, aux.label_sets)]
    ncb = models.build_ncb(model, "train-on-gradients", aux_caps, aux.label_sets, seed=3)
    cfg = AttackConfig()
    ncb_hits = sign_hits = 0
    for x, s in zip(held.images, held.label_sets):
        cap = fl.client_step(model, x, s, "bce")
        ncb_hits += attack.infer_multi_label(cap, ncb, cfg).labels == tuple(s)
        sign_hits += attack.sign_label(cap).labels == tuple(s)
    seconds = time.perf_counter() - start
    ok = ncb_hits >= 60 and ncb_hits > sign_hits and seconds < 600
    report(3, ok, f"NCB exact label sets {ncb_hits}/100 vs cross-entropy-sign baseline {sign_hits}/100",
           seconds, 600)
    assert ok


# -- 4. canny -------------------------------------------------------------------------

def test_criterion_4_canny_matches_reference():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for k in range(50):
        img = rng.random((32, 32))
        if k % 2:
            img = imaging.ndimage.gaussian_filter(img, 1.5)
        top = np.hypot(*imaging.sobel_gradients(imaging.ndimage.gaussian_filter(img, 1.0))).max()
        lo, hi = sorted(rng.uniform(0.0, top, size=2))
        mismatches += int((imaging.canny(img, lo, hi).mask != canny_reference(img, lo, hi)).sum())
    step = np.zeros((32, 32))
    step[:, 16:] = 1.0
    step_mask = imaging.canny(step, 0.1, 0.2).mask
    mismatches += int((step_mask != canny_reference(step, 0.1, 0.2)).sum())
    step_ok = step_mask.any() and set(np.nonzero(step_mask)[1].tolist()) <= {15, 16}
    const_ok = imaging.canny(np.full((32, 32), 0.6), 0.1, 0.2).count() == 0
    seconds = time.perf_counter() - start
    ok = mismatches == 0 and step_ok and const_ok and seconds < 60
    report(4, ok, f"{mismatches} mismatching pixels over 50 random images + step + constant; "
                  f"step edges in columns {sorted(set(np.nonzero(step_mask)[1].tolist()))}", seconds, 60)
    assert ok


# -- 5. reconstruction sanity ----------------------------------------------------------

def _downsampled_sprites(count, seed):
    ds = sprites.generate_sprites(sprites.SpriteConfig(count=count, height=16, width=16, class_count=2), seed)
    return ds.images.reshape(count, 1, 8, 2, 8, 2).mean(axis=(3, 5)), ds.label_sets


@pytest.mark.slow
def test_criterion_5_reconstruction_sanity():
    start = time.perf_counter()
    linear = models.build_linear_model((1, 8, 8), 2, seed=0)
    images, labels = _downsampled_sprites(10, 5)
    dlg = []
    for seed in range(10):
        cap = fl.client_step(linear, images[seed], labels[seed])
        rep = attack.run_attack(linear, None, cap, AttackConfig(strategy="DLG", max_iterations=2000, seed=seed))
        dlg.append(imaging.psnr(images[seed][0], rep.reconstruction[0]))
    cnn = models.build_micro_cnn(seed=0)
    ds = sprites.generate_sprites(sprites.SpriteConfig(count=10, mode="single"), 50)
    ggi = []
    for seed in range(10):
        cap = fl.client_step(cnn, ds.images[seed], ds.label_sets[seed])
        rep = attack.run_attack(cnn, None, cap, AttackConfig(strategy="GGI", max_iterations=20000, seed=seed))
        ggi.append(imaging.psnr(ds.images[seed][0], rep.reconstruction[0]))
    seconds = time.perf_counter() - start
    dlg_ok = sum(p >= 40.0 for p in dlg)
    ggi_ok = sum(p >= 18.0 for p in ggi)
    ok = dlg_ok == 10 and ggi_ok >= 8 and seconds < 900
    report(5, ok, f"DLG linear 8x8 >= 40 dB on {dlg_ok}/10 (min {min(dlg):.1f} dB); "
                  f"GGI MicroCNN 32x32 >= 18 dB on {ggi_ok}/10 "
                  f"(PSNR {', '.join(f'{p:.1f}' for p in ggi)})", seconds, 900)
    assert ok


# -- 6. MGIC vs GGI ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_mgic_versus_ggi():
    start = time.perf_counter()
    model = models.build_micro_cnn(seed=0)
    aux = sprites.generate_sprites(sprites.SpriteConfig(count=300, mode="multi"), 60)
    aux_caps = [fl.client_step(model, x, s, "bce") for x, s in zip(aux.images, aux.label_sets)]
    ncb = models.build_ncb(model, "train-on-gradients", aux_caps, aux.label_sets, seed=3)
    victims = sprites.generate_sprites(sprites.SpriteConfig(count=20, mode="multi"), 61)
    stats = {"GGI": [], "MGIC": []}
    for x, s in zip(victims.images, victims.label_sets):
        cap = fl.client_step(model, x, s, "bce")
        for strategy in stats:
            rep = attack.run_attack(model, ncb, cap, AttackConfig(strategy=strategy, max_iterations=20000))
            stats[strategy].append((imaging.ssim(x[0], rep.reconstruction[0]), rep.baseline_error))
            print(f"  {strategy} labels {s} -> {rep.labels.labels}: ssim {stats[strategy][-1][0]:.3f}, "
                  f"baseline error {rep.baseline_error:.2f}", flush=True)
    seconds = time.perf_counter() - start
    mean = {k: np.mean(np.array(v), axis=0) for k, v in stats.items()}
    ok = (mean["MGIC"][0] >= mean["GGI"][0] and mean["MGIC"][1] <= mean["GGI"][1] and seconds < 1800)
    report(6, ok, f"mean SSIM MGIC {mean['MGIC'][0]:.4f} vs GGI {mean['GGI'][0]:.4f}; "
                  f"mean baseline error MGIC {mean['MGIC'][1]:.3f} vs GGI {mean['GGI'][1]:.3f} px", seconds, 1800)
    assert ok


# -- 7. objective identities ---------------------------------------------------------------

def test_criterion_7_objective_identities():
    start = time.perf_counter()
    model = models.build_micro_cnn(seed=0)
    ds = sprites.generate_sprites(sprites.SpriteConfig(count=10, mode="multi"), 70)
    rng = np.random.default_rng(7)
    worst_dlg = worst_cos = worst_split = 0.0
    for i, (x, s) in enumerate(zip(ds.images, ds.label_sets)):
        kind = "bce" if i % 2 else "ce"
        labels = list(s) if kind == "bce" else [s[0]]
        cap = fl.client_step(model, x, labels, kind)
        cfg = AttackConfig()
        worst_dlg = max(worst_dlg, abs(attack.objective("DLG", x, labels, cap, model, cfg)[0]))
        worst_cos = max(worst_cos, abs(attack.objective("GGI", x, labels, cap, model, cfg)[1]["match"]))
        probe = rng.random(x.shape)
        nca = replace(cfg, alpha_ca=0.0)
        g_total, g_terms = attack.objective("GGI", probe, labels, cap, model, nca)
        m_total, m_terms = attack.objective("MGIC", probe, labels, cap, model, nca)
        split = max(abs(m_terms["match"] - g_terms["match"]), abs(m_terms["tv"] - g_terms["tv"]),
                    abs(m_terms["l2"] - attack.r_l2(probe)),
                    abs(m_total - (g_total + nca.alpha_l2 * attack.r_l2(probe))))
        worst_split = max(worst_split, split)
    seconds = time.perf_counter() - start
    ok = worst_dlg <= 1e-10 and worst_cos <= 1e-10 and worst_split <= 1e-12
    report(7, ok, f"max DLG at truth {worst_dlg:.1e}, max 1-cos at truth {worst_cos:.1e}, "
                  f"max MGIC(alpha_CA=0) - (GGI + alpha_L2 r_l2) {worst_split:.1e}", seconds)
    assert ok


# -- 8. determinism ------------------------------------------------------------------------

def _tree(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            if n.endswith((".csv", ".pgm", ".ppm", ".png")):
                path = os.path.join(dirpath, n)
                with open(path, "rb") as fh:
                    files[os.path.relpath(path, root)] = fh.read()
    return files


def test_criterion_8_manifest_rerun_is_byte_identical(tmp_path):
    start = time.perf_counter()
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("capture.count=4\nncb.count=40\nncb.epochs=10\nattack.max_iterations=200\n"
                   f"output.dir={tmp_path / 'first'}\n")
    codes = [cli.main([c, "--config", str(cfg)]) for c in ("train", "capture", "bench")]
    manifest = tmp_path / "first" / "manifest_bench.txt"
    codes += [cli.main([c, "--config", str(manifest), "--set", f"output.dir={tmp_path / 'again'}"])
              for c in ("train", "capture", "bench")]
    first, again = _tree(tmp_path / "first"), _tree(tmp_path / "again")
    differing = sorted(k for k in first if first[k] != again.get(k))
    seconds = time.perf_counter() - start
    ok = codes == [0] * 6 and first.keys() == again.keys() and not differing and len(first) > 10
    report(8, ok, f"{len(first)} CSV/image files compared after manifest rerun, {len(differing)} differ", seconds)
    assert ok


# -- 9. degenerate inputs --------------------------------------------------------------------

def test_criterion_9_degenerate_inputs_fall_back():
    start = time.perf_counter()
    model = models.build_micro_cnn(seed=0)
    ds = sprites.generate_sprites(sprites.SpriteConfig(count=1, mode="multi"), 90)
    cap = fl.client_step(model, ds.images[0], ds.label_sets[0], "bce")
    const = fl.GradientCapture({k: np.full(v.shape, 0.25) for k, v in cap.grads.items()},
                               cap.arch_fingerprint, cap.loss_kind, cap.class_count)
    ncb = models.build_ncb(model, "train-on-gradients", [cap], ds.label_sets, epochs=2)
    cfg = AttackConfig(strategy="MGIC", max_iterations=50)
    flat = attack.run_attack(model, ncb, const, cfg)
    # an edge-free reconstruction: constant start and a negligible step size
    quiet = attack.run_attack(model, ncb, cap, replace(cfg, lr=1e-12), initial=np.full(model.input_shape, 0.5))
    seconds = time.perf_counter() - start
    ok = ("ca_g_center" in flat.baseline_flags and flat.ca_g.fallback
          and "ca_t_center" in quiet.baseline_flags and quiet.ca_t.fallback
          and np.isfinite(flat.objective_trace).all() and np.isfinite(quiet.objective_trace).all())
    report(9, ok, f"constant-gradient flags {flat.baseline_flags}; edge-free flags {quiet.baseline_flags}", seconds)
    assert ok
