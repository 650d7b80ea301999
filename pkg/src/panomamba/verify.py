"""Re-runnable invariant suites behind `verify --suite ...`.

Each check is a pure function returning (ok, detail); suites aggregate them
into a pass/fail table. Checks self-seed, so running them concurrently (the
--jobs flag) cannot change outcomes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diffusion as diff
from . import pano, ssm
from . import tensor as T
from .conditioning import GMA, VCR, CONTEXT_ROWS
from .rng import Rng
from .tensor import Tensor


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str


def _band_limited_pano(w, h):
    dirs = pano.equirect_dir_grid(w, h)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    img = np.stack(
        [
            0.5 + 0.25 * np.sin(2 * x) + 0.15 * y,
            0.5 + 0.2 * np.cos(2 * z) + 0.1 * np.sin(1.5 * y),
            0.5 + 0.2 * x * z + 0.15 * np.cos(2 * y),
        ],
        axis=-1,
    )
    return pano.EquirectImage(Tensor(np.clip(img, 0, 1)))


# --- scan suite ---------------------------------------------------------------


def check_scan_equivalence():
    worst = 0.0
    cases = 0
    for L in (1, 2, 7, 64, 1024):
        for rep in range(4):
            A, b, c, dl, x = ssm.random_scan_problem(L, 16, 8, seed=1000 * L + rep)
            disc = ssm.discretize_zoh(A, b, dl)
            ys = ssm.selective_scan_seq(disc, c, x).data
            yp = ssm.selective_scan_parallel(disc, c, x).data
            worst = max(worst, float(np.max(np.abs(ys - yp))))
            cases += 1
    return worst <= 1e-10, f"{cases} configs, max |parallel - seq| = {worst:.2e} (tol 1e-10)"


def check_scan_equivalence_f32():
    worst = 0.0
    for L in (1, 2, 7, 64, 1024):
        A, b, c, dl, x = ssm.random_scan_problem(L, 16, 8, seed=L, dtype=np.float32)
        disc = ssm.discretize_zoh(A, b, dl)
        ys = ssm.selective_scan_seq(disc, c, x).data
        yp = ssm.selective_scan_parallel(disc, c, x).data
        worst = max(worst, float(np.max(np.abs(ys - yp))))
    return worst <= 1e-5, f"32-bit max |parallel - seq| = {worst:.2e} (tol 1e-5)"


def check_zoh_closed_forms():
    d1 = ssm.discretize_zoh(np.array([[1.0]]), np.array([[1.0]]), np.array([[np.log(2.0)]]))
    e1 = max(abs(float(d1.a_bar.data.reshape(-1)[0]) - 2.0), abs(float(d1.b_bar.data.reshape(-1)[0]) - 1.0))
    d2 = ssm.discretize_zoh(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    e2 = max(abs(float(d2.a_bar.data.reshape(-1)[0]) - np.exp(-1.0)), abs(float(d2.b_bar.data.reshape(-1)[0]) - (1.0 - np.exp(-1.0))))
    err = max(e1, e2)
    return err <= 1e-12, f"scalar ZOH error {err:.2e} (tol 1e-12)"


def check_zoh_branch_continuity():
    th = ssm.ZOH_SMALL_THRESHOLD
    lo = float(ssm.expm1_over_x(Tensor(np.array(th * (1 - 1e-6)))).data)
    hi = float(ssm.expm1_over_x(Tensor(np.array(th * (1 + 1e-6)))).data)
    gap = abs(hi - lo)
    return gap <= 1e-10, f"phi gap across 1e-8 threshold = {gap:.2e} (tol 1e-10)"


def check_scan_stability():
    A, b, c, dl, x = ssm.random_scan_problem(4096, 8, 4, seed=3)
    disc = ssm.discretize_zoh(A, b, dl)
    ab = disc.a_bar.data
    inside = np.all((ab > 0) & (ab < 1))
    y = ssm.selective_scan_parallel(disc, c, x).data
    return inside and bool(np.isfinite(y).all()), (
        f"|a_bar| in (0,1): {inside}; outputs finite over L=4096"
    )


def check_state_chaining():
    A, b, c, dl, x = ssm.random_scan_problem(48, 8, 4, seed=11)
    disc = ssm.discretize_zoh(A, b, dl)
    full, h_full = ssm.selective_scan_seq(disc, c, x, return_state=True)
    cut = 17
    d1 = ssm.DiscreteSSM(disc.a_bar[:cut], disc.b_bar[:cut])
    d2 = ssm.DiscreteSSM(disc.a_bar[cut:], disc.b_bar[cut:])
    y1, h1 = ssm.selective_scan_seq(d1, c[:cut], x[:cut], return_state=True)
    y2, h2 = ssm.selective_scan_seq(d2, c[cut:], x[cut:], h0=h1, return_state=True)
    same = np.array_equal(full.data, np.concatenate([y1.data, y2.data])) and np.array_equal(
        h_full.data, h2.data
    )
    return same, "scan(concat) == chain(scan, scan | h0) exactly"


# --- gradient suite -------------------------------------------------------------


def check_op_gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    x = Tensor(rng.normal(size=(4, 5)))
    y = Tensor(rng.normal(size=(5,)))
    m = Tensor(rng.normal(size=(5, 3)))
    checks = [
        lambda: T.gradcheck(lambda a: (a @ m).sum(), [Tensor(rng.normal(size=(4, 5)))]),
        lambda: T.gradcheck(lambda a, b: (a * b).mean(), [x, y]),
        lambda: T.gradcheck(lambda a: T.sigmoid(a).sum(), [Tensor(rng.normal(size=7))]),
        lambda: T.gradcheck(lambda a: T.silu(a).sum(), [Tensor(rng.normal(size=7))]),
        lambda: T.gradcheck(lambda a: T.softplus(a).sum(), [Tensor(rng.normal(size=7))]),
        lambda: T.gradcheck(lambda a: a.mean(axes=1).sum(), [Tensor(rng.normal(size=(3, 4)))]),
    ]
    for c in checks:
        worst = max(worst, c())
    return worst <= 1e-4, f"core op gradcheck max rel err {worst:.2e} (tol 1e-4)"


def check_block_gradients():
    rng = np.random.default_rng(1)
    blk = ssm.Mamba1D(8, 4, rng)
    x = Tensor(rng.normal(size=(6, 8)) * 0.5)
    e1 = T.gradcheck(lambda a: (blk(a) * blk(a)).sum(), [x], max_coords=24)
    b2 = ssm.Mamba2D(8, 4, np.random.default_rng(2))
    g = Tensor(rng.normal(size=(3, 4, 8)) * 0.5)
    e2 = T.gradcheck(lambda a: (b2(a) * b2(a)).sum(), [g], max_coords=24)
    worst = max(e1, e2)
    return worst <= 1e-4, f"1D/2D block gradcheck max rel err {worst:.2e} (tol 1e-4)"


# --- geometry suite --------------------------------------------------------------


def check_unit_norms():
    dirs = pano.equirect_dir_grid(128, 64)
    err = float(np.max(np.abs(np.linalg.norm(dirs, axis=-1) - 1.0)))
    rays = pano.view_ray_grid(pano.ViewCoords(33, -21, 75), 32)
    err = max(err, float(np.max(np.abs(np.linalg.norm(rays, axis=-1) - 1.0))))
    return err <= 1e-12, f"direction norm error {err:.2e} (tol 1e-12)"


def check_wrap_identity():
    img = _band_limited_pano(256, 128).np
    vf = np.linspace(3.0, 100.0, 17)
    a = pano._bilinear_wrap(img, np.full(17, -0.25), vf)
    b = pano._bilinear_wrap(img, np.full(17, 256 - 0.25), vf)
    same = np.array_equal(a, b)
    return same, "sampling at u = -0.25 equals u = W - 0.25 exactly"


def check_roundtrip_psnr():
    img = _band_limited_pano(256, 128)
    cube = pano.equirect_to_cubemap(img, 64)
    back = pano.cubemap_to_equirect(cube, 256, 128)
    band = slice(12, 116)  # exclude top/bottom 10% of 128 rows
    p = pano.psnr(img.np[band], back.np[band])
    return p >= 30.0, f"equirect->cube(64)->equirect PSNR {p:.1f} dB (need >= 30)"


def check_extract_composite():
    img = _band_limited_pano(256, 128)
    view = pano.extract_nfov(img, pano.ViewCoords(40, 15, 90), 64)
    out = pano.composite_nfov(img, view)
    diff = np.abs(out.np - img.np)
    changed = diff.max(axis=-1) > 0
    mean_change = float(diff[changed].mean()) if changed.any() else 0.0
    out2 = pano.composite_nfov(out, view)
    idem = np.array_equal(out.np, out2.np)
    return mean_change <= 2 / 255 and idem, (
        f"mean abs change {mean_change:.5f} (tol {2/255:.5f}); composite idempotent: {idem}"
    )


# --- diffusion suite --------------------------------------------------------------


def check_schedule_tables():
    s = diff.make_schedule(1000)
    ab = s.alpha_bars
    mono = bool(np.all(np.diff(ab) < 0))
    prod_ok = bool(np.allclose(ab, np.cumprod(1.0 - s.betas), atol=1e-12, rtol=0))
    tail = abs(ab[-1] - 4.0358e-5) < 1e-8
    return mono and prod_ok and tail, (
        f"alpha_bar strictly decreasing: {mono}; alpha_bar_T = {ab[-1]:.3e}"
    )


def check_marginal_variance():
    s = diff.make_schedule(1000)
    rng = Rng(99).split("variance")
    n = 100_000
    worst = 0.0
    for t in (1, 500, 1000):
        eps = Tensor(rng.normal(size=n))
        zt = diff.q_sample(Tensor(np.zeros(n)), t, eps, s)
        target = 1.0 - s.alpha_bar(t)
        rel = abs(float(zt.data.var()) - target) / target
        worst = max(worst, rel)
    return worst <= 0.02, f"q_sample variance rel err {worst:.4f} over t in (1, T/2, T) (tol 2%)"


def check_cfg_identities():
    rng = np.random.default_rng(5)
    ec, eu = Tensor(rng.normal(size=8)), Tensor(rng.normal(size=8))
    a = diff.cfg_combine(ec, eu, 1.0)
    b = diff.cfg_combine(ec, eu, 0.0)
    c = diff.cfg_combine(ec, eu, 2.5)
    ok = (
        np.array_equal(a.data, ec.data)
        and np.array_equal(b.data, eu.data)
        and np.allclose(c.data, eu.data + 2.5 * (ec.data - eu.data), rtol=0, atol=1e-15)
    )
    return ok, "cfg scale 1 == conditional (exact); scale 0 == unconditional; 2.5 linear"


def check_sampling_determinism():
    s = diff.make_schedule(200)
    model = lambda z, t, c: z * 0.05
    za = diff.sample(model, None, s, 20, 1.0, Rng(3).split("g"), (2, 4, 4))
    zb = diff.sample(model, None, s, 20, 1.0, Rng(3).split("g"), (2, 4, 4))
    return bool(np.array_equal(za.data, zb.data)), "same seed twice is bit-identical"


# --- conditioning suites ------------------------------------------------------------


def _vcr_fixture():
    rng = np.random.default_rng(8)
    vcr = VCR(16, 4, rng, n_blocks=2)
    c_clip = Tensor(rng.normal(size=(CONTEXT_ROWS, 16)))
    return vcr, c_clip


def check_vcr_shape():
    vcr, c_clip = _vcr_fixture()
    out = vcr(c_clip)
    return out.shape == (83, 16), f"context rows x d = {out.shape} (want (83, 16))"


def check_vcr_gates():
    vcr, c_clip = _vcr_fixture()
    vcr.h2.weight.data[...] = 0.0
    vcr.h2.bias.data[...] = -40.0
    closed = float(np.max(np.abs(vcr(c_clip).data - c_clip.data)))
    vcr.h2.bias.data[...] = 40.0
    out, c_prime, _ = vcr(c_clip, return_parts=True)
    opened = float(np.max(np.abs(out.data - c_prime.data)))
    err = max(closed, opened)
    return err <= 1e-6, f"gate-closed/open identity error {err:.2e} (tol 1e-6)"


def check_vcr_alpha_range():
    vcr, c_clip = _vcr_fixture()
    _, _, alpha = vcr(c_clip, return_parts=True)
    ok = bool(np.all((alpha.data > 0) & (alpha.data < 1)))
    return ok, f"alpha in (0,1): {ok}"


def _gma_fixture(active):
    rng = np.random.default_rng(9)
    gma = GMA(16, 4, rng, out_widths=(8, 8, 8, 8), active_scales=active)
    img = np.clip(np.random.default_rng(4).uniform(size=(64, 128, 4)), 0, 1)
    img[:, :, 3] = 1.0
    p = pano.EquirectImage(Tensor(img))
    cube = pano.equirect_to_cubemap(p, 64)
    view = pano.extract_nfov(p, pano.ViewCoords(10, 5, 90), 64)
    return gma, view, cube


def check_gma_ladder():
    gma, view, cube = _gma_fixture((2, 3, 4))
    outs = gma(view, cube)
    ext = [o.shape[:2] for o in outs]
    want = [(8, 8), (4, 4), (2, 2), (1, 1)]
    return ext == want and len(outs) == 4, f"extents {ext} (want {want})"


def check_gma_active_sets():
    ok = True
    for active in ((4,), (3, 4), (2, 3, 4), (1, 2, 3, 4)):
        gma, view, cube = _gma_fixture(active)
        outs = gma(view, cube)
        ok = ok and len(outs) == 4 and all(np.isfinite(o.data).all() for o in outs)
    return ok, "active-set grid [4] [3,4] [2,3,4] [1,2,3,4] all run with finite outputs"


def check_gma_memoryless():
    gma, view, cube = _gma_fixture((2, 3, 4))
    for blk in gma.global_local:
        blk.core.a_log.data[...] = 40.0  # a_bar underflows to exactly 0
    on = gma(view, cube)
    gma.active_scales = ()
    off = gma(view, cube)
    same = all(np.array_equal(a.data, b.data) for a, b in zip(on, off))
    return same, "with a_bar -> 0 the chained and unchained outputs coincide exactly"


SUITES = {
    "scan": [
        check_scan_equivalence,
        check_scan_equivalence_f32,
        check_zoh_closed_forms,
        check_zoh_branch_continuity,
        check_scan_stability,
        check_state_chaining,
    ],
    "grad": [check_op_gradients, check_block_gradients],
    "geometry": [check_unit_norms, check_wrap_identity, check_roundtrip_psnr, check_extract_composite],
    "diffusion": [
        check_schedule_tables,
        check_marginal_variance,
        check_cfg_identities,
        check_sampling_determinism,
    ],
    "vcr": [check_vcr_shape, check_vcr_gates, check_vcr_alpha_range],
    "gma": [check_gma_ladder, check_gma_active_sets, check_gma_memoryless],
}


def run_suite(name, jobs=1):
    if name == "all":
        checks = [(s, fn) for s in SUITES for fn in SUITES[s]]
    elif name in SUITES:
        checks = [(name, fn) for fn in SUITES[name]]
    else:
        raise T.ContractError(f"unknown suite {name!r}; known: {sorted(SUITES) + ['all']}")

    def run(item):
        suite, fn = item
        try:
            ok, detail = fn()
        except Exception as e:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        return CheckResult(suite, fn.__name__.replace("check_", ""), ok, detail)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(run, checks))
    return [run(c) for c in checks]
