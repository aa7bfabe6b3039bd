"""Central finite-difference verification of every analytic gradient.

Four suites: tensor primitives, the scale-deformable convolution's four
gradient families, the training losses, and the end-to-end model. All run
in 64-bit mode with step 1e-4 and compare at relative tolerance 1e-5
(1e-4 end to end). Non-smooth points are excluded, never averaged over:
the deformable suite drops components whose sampling coordinates sit
within 1e-3 of an integer, and the composite suites reject any probe
whose relu/abs/bilinear branch pattern differs between the two evaluation
points (see ``fd_gradient_guarded``).

``run_all(mutate="dil_chain_sign")`` deliberately flips the sign of the
dilation-rate chain rule while the deformable suite runs; a healthy suite
must then fail, proving the checks are not vacuous.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import sdc as sdc_mod
from . import tensor as T
from .errors import CheckFailure, ConfigError
from .losses import LossConfig, loss_total, sample_pairs
from .model import HeightRegressor, ModelSpec
from .sdc import SdcParams, sdc_backward, sdc_forward, tap_grid
from .tensor import Graph, Tensor

FD_STEP = 1e-4
KINK_BAND = 1e-3
TOL = 1e-5
TOL_END2END = 1e-4

MUTATIONS = ("none", "dil_chain_sign")


@dataclass
class FamilyResult:
    family: str
    n_checked: int
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err <= self.tol


@dataclass
class GradcheckReport:
    rows: list[FamilyResult]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def text(self) -> str:
        lines = [f"{'family':<24} {'checked':>8} {'max rel err':>13} {'tol':>9} verdict"]
        for r in self.rows:
            verdict = "PASS" if r.ok else "FAIL"
            lines.append(f"{r.family:<24} {r.n_checked:>8d} {r.max_rel_err:>13.3e} "
                         f"{r.tol:>9.0e} {verdict}")
        lines.append(f"overall: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error; near-zero pairs compare absolutely."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.abs(a), np.abs(b))
    small = denom < 1e-7
    err = np.abs(a - b) / np.where(small, 1.0, denom)
    return float(err.max()) if err.size else 0.0


def fd_gradient(f, arr: np.ndarray, indices, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar f() w.r.t. arr at the given flat indices."""
    flat = arr.reshape(-1)
    out = np.zeros(len(indices))
    for pos, i in enumerate(indices):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f()
        flat[i] = saved - eps
        lo = f()
        flat[i] = saved
        out[pos] = (hi - lo) / (2 * eps)
    return out


def fd_gradient_guarded(f, arr: np.ndarray, indices, eps: float = FD_STEP):
    """Central differences with kink-crossing rejection.

    Every evaluation collects the discrete branch pattern of the kinked ops
    it runs (relu signs, abs signs, bilinear cell indices); a component is
    valid only when both probe points share the unperturbed pattern, i.e.
    the probe never crossed a non-smooth boundary. Validity uses only the
    forward evaluations, so it cannot mask a wrong analytic rule at smooth
    points. Returns (fd, valid).
    """
    _, base_sig = T.eval_with_kink_signature(f)
    flat = arr.reshape(-1)
    fd = np.zeros(len(indices))
    valid = np.zeros(len(indices), dtype=bool)
    for pos, i in enumerate(indices):
        saved = flat[i]
        flat[i] = saved + eps
        hi, sig_hi = T.eval_with_kink_signature(f)
        flat[i] = saved - eps
        lo, sig_lo = T.eval_with_kink_signature(f)
        flat[i] = saved
        fd[pos] = (hi - lo) / (2 * eps)
        valid[pos] = sig_hi == base_sig and sig_lo == base_sig
    return fd, valid


@contextmanager
def mutated(mutate: str):
    """Optionally corrupt one gradient rule for the duration of the block."""
    if mutate not in MUTATIONS:
        raise ConfigError(f"unknown mutation {mutate!r}; known: {MUTATIONS}")
    if mutate == "none":
        yield
        return
    saved = sdc_mod._dil_chain_sign
    sdc_mod._dil_chain_sign = -saved
    try:
        yield
    finally:
        sdc_mod._dil_chain_sign = saved


# ----------------------------------------------------------------------
# suites


def _subsample(rng, size, k):
    k = min(k, size)
    return rng.choice(size, size=k, replace=False).tolist()


def check_tensor_ops(seed: int = 0) -> list[FamilyResult]:
    rows = []
    rng0 = np.random.default_rng(seed)

    def conv_case():
        errs, n = [], 0
        for _ in range(5):
            xd = rng0.normal(size=(1, 2, 5, 5))
            wd = rng0.normal(size=(2, 2, 3, 3))
            bd = rng0.normal(size=2)
            gd = rng0.normal(size=(1, 2, 5, 5))

            def scalar():
                out = T.conv2d(Tensor(xd), Tensor(wd), Tensor(bd), pad=1)
                return float((out * Tensor(gd)).sum().data)

            x, w, b = Tensor(xd, True), Tensor(wd, True), Tensor(bd, True)
            with Graph() as g:
                loss = (T.conv2d(x, w, b, pad=1) * Tensor(gd)).sum()
            g.backward(loss)
            for tens, arr in ((x, xd), (w, wd), (b, bd)):
                idx = _subsample(rng0, arr.size, 12)
                fd = fd_gradient(scalar, arr, idx)
                errs.append(rel_err(tens.grad.reshape(-1)[idx], fd))
                n += len(idx)
        return FamilyResult("conv2d (x,w,bias)", n, max(errs), TOL)

    def pool_case():
        errs, n = [], 0
        for _ in range(5):
            xd = rng0.normal(size=(1, 1, 8, 8))
            gd = rng0.normal(size=(1, 1, 4, 4))

            def scalar():
                return float((T.resize_avg(Tensor(xd), 0.5) * Tensor(gd)).sum().data)

            x = Tensor(xd, True)
            with Graph() as g:
                loss = (T.resize_avg(x, 0.5) * Tensor(gd)).sum()
            g.backward(loss)
            idx = _subsample(rng0, xd.size, 16)
            fd = fd_gradient(scalar, xd, idx)
            errs.append(rel_err(x.grad.reshape(-1)[idx], fd))
            n += len(idx)
        return FamilyResult("resize_avg", n, max(errs), TOL)

    def composite_case():
        errs, n = [], 0
        for _ in range(5):
            xd = rng0.normal(size=(1, 2, 4, 4))
            wd = rng0.normal(size=(1, 2, 3, 3))
            gtd = rng0.normal(size=(1, 1, 4, 4))

            def scalar():
                pred = T.relu(T.conv2d(Tensor(xd), Tensor(wd), pad=1))
                r = pred - Tensor(gtd)
                return float((r * r).mean().data)

            x = Tensor(xd, True)
            with Graph() as g:
                pred = T.relu(T.conv2d(x, Tensor(wd), pad=1))
                r = pred - Tensor(gtd)
                loss = (r * r).mean()
            g.backward(loss)
            idx = np.asarray(_subsample(rng0, xd.size, 16))
            fd, ok = fd_gradient_guarded(scalar, xd, idx)
            if ok.any():
                errs.append(rel_err(x.grad.reshape(-1)[idx[ok]], fd[ok]))
                n += int(ok.sum())
        return FamilyResult("conv-relu-mse composite", n,
                            max(errs) if errs else np.inf, TOL)

    with T.precision("f64"):
        rows.append(conv_case())
        rows.append(pool_case())
        rows.append(composite_case())
    return rows


def _near_kink(p: SdcParams, h: int, w: int) -> np.ndarray:
    """Per-(tap, pixel) mask of sampling coordinates within the kink band."""
    k = p.k
    eta = np.logaddexp(0, p.dil_raw.data)
    gi = np.arange(h)[None, :, None]
    gj = np.arange(w)[None, None, :]
    near = np.zeros((p.offsets.dims[0], k * k, h, w), dtype=bool)
    for t, (pni, pnj) in enumerate(tap_grid(k)):
        pi = gi + eta[:, 0] * pni + p.offsets.data[:, 2 * t]
        pj = gj + eta[:, 1] * pnj + p.offsets.data[:, 2 * t + 1]
        for q in (pi, pj):
            near[:, t] |= np.abs(q - np.round(q)) < KINK_BAND
    return near


def check_sdc(seed: int = 0, instances: int = 20) -> list[FamilyResult]:
    """All four gradient families of the deformable operator against central
    differences, on random instances up to 2x3x8x8 with k=3."""
    shapes = [(1, 1, 4, 4, 1), (1, 2, 5, 5, 2), (2, 3, 8, 8, 2), (1, 3, 6, 6, 3)]
    errs = {"input": [], "weight": [], "offsets": [], "dil_raw": []}
    counts = {k: 0 for k in errs}
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        for trial in range(instances):
            n, c, h, w, co = shapes[trial % len(shapes)]
            xd = rng.normal(size=(n, c, h, w))
            wd = rng.normal(size=(co, c, 3, 3))
            offd = 0.7 * rng.normal(size=(n, 18, h, w))
            dild = 0.5 * rng.normal(size=(n, 2, h, w))
            gout = rng.normal(size=(n, co, h, w))

            def scalar():
                p = SdcParams(Tensor(wd), Tensor(offd), Tensor(dild))
                return float((sdc_forward(Tensor(xd), p).data * gout).sum())

            p = SdcParams(Tensor(wd), Tensor(offd), Tensor(dild))
            gx, gw, goff, gdil = sdc_backward(Tensor(xd), p, gout)
            near = _near_kink(p, h, w)

            idx = _subsample(rng, xd.size, 12)
            fd = fd_gradient(scalar, xd, idx)
            errs["input"].append(rel_err(gx.reshape(-1)[idx], fd))
            counts["input"] += len(idx)

            idx = _subsample(rng, wd.size, 12)
            fd = fd_gradient(scalar, wd, idx)
            errs["weight"].append(rel_err(gw.reshape(-1)[idx], fd))
            counts["weight"] += len(idx)

            ok_off = ~np.repeat(near, 2, axis=1).reshape(-1)
            idx = [i for i in _subsample(rng, offd.size, 20) if ok_off[i]]
            if idx:
                fd = fd_gradient(scalar, offd, idx)
                errs["offsets"].append(rel_err(goff.reshape(-1)[idx], fd))
                counts["offsets"] += len(idx)

            ok_dil = ~np.broadcast_to(near.any(axis=1, keepdims=True),
                                      dild.shape).reshape(-1)
            idx = [i for i in _subsample(rng, dild.size, 12) if ok_dil[i]]
            if idx:
                fd = fd_gradient(scalar, dild, idx)
                errs["dil_raw"].append(rel_err(gdil.reshape(-1)[idx], fd))
                counts["dil_raw"] += len(idx)
    return [FamilyResult(f"sdc {name}", counts[name],
                         max(errs[name]) if errs[name] else np.inf, TOL)
            for name in ("input", "weight", "offsets", "dil_raw")]


def check_losses(seed: int = 0) -> list[FamilyResult]:
    rows = []
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        for variant in ("mse_only", "si", "rank", "msg"):
            errs, n = [], 0
            for _ in range(4):
                pd = rng.normal(size=(1, 1, 4, 4)) * 3
                gd = np.abs(rng.normal(size=(1, 1, 4, 4))) * 3
                cfg = LossConfig(variant=variant, msg_scales=(1.0, 0.5))
                pairs = sample_pairs(gd, 8, 0.25, np.random.default_rng(seed))

                def scalar():
                    return float(loss_total(Tensor(pd), Tensor(gd), cfg, pairs).data)

                p = Tensor(pd, True)
                with Graph() as g:
                    loss = loss_total(p, Tensor(gd), cfg, pairs)
                g.backward(loss)
                idx = np.arange(pd.size)
                fd, ok = fd_gradient_guarded(scalar, pd, idx)
                if ok.any():
                    errs.append(rel_err(p.grad.reshape(-1)[ok], fd[ok]))
                    n += int(ok.sum())
            rows.append(FamilyResult(f"loss {variant}", n,
                                     max(errs) if errs else np.inf, TOL))
    return rows


def check_end_to_end(seed: int = 0) -> list[FamilyResult]:
    """Full model + loss gradient on a 1x3x8x8 input.

    The deformable branches get jittered off their standard-conv init so
    the sampling grid is generic; kink-crossing rejection then drops the
    remaining unluckily placed probes (a deep relu net always has a few
    units near zero, which would otherwise poison finite differences for
    every upstream parameter).
    """
    with T.precision("f64"):
        rng = np.random.default_rng(seed)
        xd = rng.uniform(size=(1, 3, 8, 8))
        gd = np.abs(rng.normal(size=(1, 1, 8, 8)))
        m = HeightRegressor.build(ModelSpec(), seed=seed)
        for name in ("mid.off_w", "mid.off_b", "mid.dil_w", "mid.dil_b"):
            t = m.params[name]
            t.data = t.data + 0.2 * rng.normal(size=t.data.shape)
        cfg = LossConfig(variant="si")

        def scalar():
            return float(loss_total(m.forward(Tensor(xd)), Tensor(gd), cfg).data)

        with Graph() as g:
            loss = loss_total(m.forward(Tensor(xd)), Tensor(gd), cfg)
        g.backward(loss)
        errs, n = [], 0
        for name, t in m.params.items():
            idx = np.asarray(_subsample(rng, t.data.size, 5))
            fd, ok = fd_gradient_guarded(scalar, t.data, idx)
            if not ok.any():
                continue
            errs.append(rel_err(t.grad.reshape(-1)[idx[ok]], fd[ok]))
            n += int(ok.sum())
    return [FamilyResult("model end-to-end", n,
                         max(errs) if errs else np.inf, TOL_END2END)]


def run_all(seed: int = 0, mutate: str = "none", sdc_instances: int = 20) -> GradcheckReport:
    rows = check_tensor_ops(seed)
    with mutated(mutate):
        rows += check_sdc(seed, instances=sdc_instances)
    rows += check_losses(seed)
    rows += check_end_to_end(seed)
    return GradcheckReport(rows)


def run_or_raise(seed: int = 0, mutate: str = "none") -> GradcheckReport:
    report = run_all(seed, mutate)
    if not report.ok:
        raise CheckFailure("gradient check failed:\n" + report.text())
    return report
