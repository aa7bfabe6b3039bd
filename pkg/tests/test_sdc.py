import numpy as np
import pytest

from mhe import sdc
from mhe import tensor as T
from mhe.errors import ShapeError
from mhe.sdc import SdcParams, init_predictor, predict_params, sdc_backward, sdc_forward, sdc_oracle
from mhe.tensor import Graph, Tensor

from conftest import fd_gradient, rel_err

KINK_BAND = 1e-3
FD_STEP = 1e-4


def make_params(rng, n, c_in, c_out, h, w, k=3, offset_scale=1.0, dil_raw=None,
                offsets=None, weight=None):
    if weight is None:
        weight = rng.normal(size=(c_out, c_in, k, k))
    if offsets is None:
        offsets = offset_scale * rng.normal(size=(n, 2 * k * k, h, w))
    if dil_raw is None:
        dil_raw = rng.normal(size=(n, 2, h, w))
    return SdcParams(weight=Tensor(weight), offsets=Tensor(offsets),
                     dil_raw=Tensor(dil_raw))


def identity_params(n, c_in, c_out, h, w, k=3, weight=None, eta=1.0, rng=None):
    """Params with dilation rate exactly eta and zero offsets."""
    if weight is None:
        weight = rng.normal(size=(c_out, c_in, k, k))
    raw = T.softplus_inverse(eta)
    return SdcParams(
        weight=Tensor(weight),
        offsets=Tensor(np.zeros((n, 2 * k * k, h, w))),
        dil_raw=Tensor(np.full((n, 2, h, w), raw)),
    )


def naive_dilated_conv(x, w, d):
    """Reference dilated convolution, zero padded, same spatial size."""
    n, c, h, ww = x.shape
    co, _, k, _ = w.shape
    r = k // 2
    out = np.zeros((n, co, h, ww))
    for b in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(ww):
                    acc = 0.0
                    for ch in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                yy = y + d * (ki - r)
                                xj = xx + d * (kj - r)
                                if 0 <= yy < h and 0 <= xj < ww:
                                    acc += w[o, ch, ki, kj] * x[b, ch, yy, xj]
                    out[b, o, y, xx] = acc
    return out


class TestForward:
    def test_reduces_to_standard_conv(self, f64):
        rng = np.random.default_rng(0)
        xd = rng.normal(size=(1, 2, 6, 6))
        p = identity_params(1, 2, 3, 6, 6, rng=rng)
        out = sdc_forward(Tensor(xd), p).data
        ref = T.conv2d(Tensor(xd), p.weight, pad=1).data
        assert rel_err(out, ref) <= 1e-6

    def test_integer_dilation_matches_dilated_conv(self, f64):
        rng = np.random.default_rng(1)
        for d in (1, 2, 3):
            xd = rng.normal(size=(1, 2, 8, 8))
            p = identity_params(1, 2, 2, 8, 8, eta=float(d), rng=rng)
            out = sdc_forward(Tensor(xd), p).data
            ref = naive_dilated_conv(xd, p.weight.data, d)
            assert rel_err(out, ref) <= 1e-6, f"dilation {d}"

    def test_fractional_center_sample(self, f64):
        # single 1x1 tap shifted to (0.5, 0.5) over [[1,2],[3,4]] -> mean 2.5
        xd = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        p = SdcParams(
            weight=Tensor(np.ones((1, 1, 1, 1))),
            offsets=Tensor(0.5 * np.ones((1, 2, 2, 2))),
            dil_raw=Tensor(np.zeros((1, 2, 2, 2))),
        )
        out = sdc_forward(Tensor(xd), p).data
        assert out[0, 0, 0, 0] == pytest.approx(2.5)

    def test_matches_oracle_random(self, f64):
        rng = np.random.default_rng(2)
        for trial in range(5):
            n, c, co = 1, 2, 2
            h = w = int(rng.integers(3, 7))
            xd = rng.normal(size=(n, c, h, w))
            p = make_params(rng, n, c, co, h, w, offset_scale=1.5)
            fast = sdc_forward(Tensor(xd), p).data
            ref = sdc_oracle(Tensor(xd), p).data
            assert rel_err(fast, ref) <= 1e-6

    def test_zero_input_zero_output(self, f64):
        rng = np.random.default_rng(3)
        p = make_params(rng, 1, 2, 2, 4, 4)
        out = sdc_forward(Tensor(np.zeros((1, 2, 4, 4))), p).data
        assert np.all(out == 0)

    def test_zero_weight_zero_output(self, f64):
        rng = np.random.default_rng(4)
        xd = rng.normal(size=(1, 2, 4, 4))
        p = make_params(rng, 1, 2, 2, 4, 4, weight=np.zeros((2, 2, 3, 3)))
        out = sdc_forward(Tensor(xd), p).data
        assert np.all(out == 0)

    def test_out_of_range_taps_contribute_zero(self, f64):
        # push every tap far outside the raster: output must vanish
        rng = np.random.default_rng(5)
        xd = rng.normal(size=(1, 1, 4, 4))
        p = make_params(rng, 1, 1, 1, 4, 4, offsets=np.full((1, 18, 4, 4), 50.0))
        out = sdc_forward(Tensor(xd), p).data
        assert np.all(out == 0)

    def test_locality(self, f64):
        # perturbing x outside the taps' bilinear footprints leaves the
        # output pixel bit-unchanged
        rng = np.random.default_rng(6)
        h = w = 8
        xd = rng.normal(size=(1, 1, h, w))
        p = make_params(rng, 1, 1, 1, h, w, offset_scale=0.4)
        out0 = sdc_forward(Tensor(xd), p).data[0, 0, 0, 0]

        # footprint of output pixel (0,0): corners of each tap's sample
        eta = np.logaddexp(0, p.dil_raw.data[0, :, 0, 0])
        fp = set()
        for t, (pni, pnj) in enumerate(sdc.tap_grid(3)):
            pi = 0 + eta[0] * pni + p.offsets.data[0, 2 * t, 0, 0]
            pj = 0 + eta[1] * pnj + p.offsets.data[0, 2 * t + 1, 0, 0]
            for a in (0, 1):
                for b in (0, 1):
                    fp.add((int(np.floor(pi)) + a, int(np.floor(pj)) + b))
        xd2 = xd.copy()
        touched = False
        for y in range(h):
            for xx in range(w):
                if (y, xx) not in fp:
                    xd2[0, 0, y, xx] += rng.normal()
                    touched = True
        assert touched
        out1 = sdc_forward(Tensor(xd2), p).data[0, 0, 0, 0]
        assert out0 == out1

    def test_channel_mismatch_rejected(self, f64):
        rng = np.random.default_rng(7)
        p = make_params(rng, 1, 3, 2, 4, 4)
        with pytest.raises(ShapeError):
            sdc_forward(Tensor(np.zeros((1, 2, 4, 4))), p)

    def test_nan_params_rejected(self, f64):
        rng = np.random.default_rng(8)
        off = rng.normal(size=(1, 18, 4, 4))
        off[0, 0, 0, 0] = np.nan
        p = SdcParams(weight=Tensor(rng.normal(size=(1, 1, 3, 3))),
                      offsets=Tensor._wrap(off),
                      dil_raw=Tensor(np.zeros((1, 2, 4, 4))))
        with pytest.raises(ValueError):
            sdc_forward(Tensor(np.zeros((1, 1, 4, 4))), p)


def _coords_near_integer(p: SdcParams, h, w, band=KINK_BAND):
    """Mask (per tap, pixel) of sampling coordinates within band of an
    integer on either axis; used to exclude kink straddles from FD."""
    k = p.k
    eta = np.logaddexp(0, p.dil_raw.data)
    gi = np.arange(h)[None, :, None]
    gj = np.arange(w)[None, None, :]
    near = np.zeros((p.offsets.data.shape[0], k * k, h, w), dtype=bool)
    for t, (pni, pnj) in enumerate(sdc.tap_grid(k)):
        pi = gi + eta[:, 0] * pni + p.offsets.data[:, 2 * t]
        pj = gj + eta[:, 1] * pnj + p.offsets.data[:, 2 * t + 1]
        for q in (pi, pj):
            frac = np.abs(q - np.round(q))
            near[:, t] |= frac < band
    return near


class TestBackward:
    def test_integral_grid_matches_conv_input_grad(self, f64):
        rng = np.random.default_rng(10)
        xd = rng.normal(size=(1, 2, 5, 5))
        p = identity_params(1, 2, 2, 5, 5, rng=rng)
        gout = rng.normal(size=(1, 2, 5, 5))
        grad_x, _, _, _ = sdc_backward(Tensor(xd), p, gout)

        x = Tensor(xd, requires_grad=True)
        with Graph() as g:
            out = T.conv2d(x, p.weight, pad=1)
            loss = (out * Tensor(gout)).sum()
        g.backward(loss)
        assert rel_err(grad_x, x.grad) <= 1e-12

    def test_all_families_match_finite_differences(self, f64):
        rng = np.random.default_rng(11)
        checked = {"x": 0, "w": 0, "off": 0, "dil": 0}
        for trial in range(6):
            n, c, co, h, w = 1, 2, 2, 5, 5
            xd = rng.normal(size=(n, c, h, w))
            wd = rng.normal(size=(co, c, 3, 3))
            offd = 0.8 * rng.normal(size=(n, 18, h, w))
            dild = 0.5 * rng.normal(size=(n, 2, h, w))
            gout = rng.normal(size=(n, co, h, w))

            def params():
                return SdcParams(weight=Tensor(wd), offsets=Tensor(offd),
                                 dil_raw=Tensor(dild))

            def scalar():
                return float((sdc_forward(Tensor(xd), params()).data * gout).sum())

            p = params()
            gx, gw, goff, gdil = sdc_backward(Tensor(xd), p, gout)
            near = _coords_near_integer(p, h, w)

            sub = rng.choice(xd.size, size=30, replace=False)
            fd = fd_gradient(scalar, xd, eps=FD_STEP, indices=sub)
            assert rel_err(gx.reshape(-1)[sub], fd.reshape(-1)[sub]) <= 1e-5
            checked["x"] += len(sub)

            fd = fd_gradient(scalar, wd, eps=FD_STEP)
            assert rel_err(gw, fd) <= 1e-5
            checked["w"] += wd.size

            # coordinate-moving families: skip components whose tap sits in
            # the kink band
            off_ok = ~np.repeat(near, 2, axis=1)
            sub = [i for i in rng.choice(offd.size, size=40, replace=False)
                   if off_ok.reshape(-1)[i]]
            fd = fd_gradient(scalar, offd, eps=FD_STEP, indices=sub)
            assert rel_err(goff.reshape(-1)[sub], fd.reshape(-1)[sub]) <= 1e-5
            checked["off"] += len(sub)

            dil_ok = ~np.broadcast_to(near.any(axis=1, keepdims=True), dild.shape)
            sub = [i for i in rng.choice(dild.size, size=30, replace=False)
                   if dil_ok.reshape(-1)[i]]
            fd = fd_gradient(scalar, dild, eps=FD_STEP, indices=sub)
            assert rel_err(gdil.reshape(-1)[sub], fd.reshape(-1)[sub]) <= 1e-5
            checked["dil"] += len(sub)
        assert all(v > 0 for v in checked.values())

    def test_constant_field_coordinate_grads_vanish(self, f64):
        # sampling a constant field is coordinate-independent for taps whose
        # footprint stays inside the raster
        rng = np.random.default_rng(12)
        n, c, co, h, w = 1, 1, 1, 8, 8
        xd = np.full((n, c, h, w), 3.7)
        offd = 0.3 * rng.normal(size=(n, 18, h, w))
        dild = 0.2 * rng.normal(size=(n, 2, h, w))
        p = SdcParams(weight=Tensor(rng.normal(size=(co, c, 3, 3))),
                      offsets=Tensor(offd), dil_raw=Tensor(dild))
        _, _, goff, gdil = sdc_backward(Tensor(xd), p, np.ones((n, co, h, w)))
        # interior pixels: all taps at least 2px from the border stay inside
        inner = goff[:, :, 3:-3, 3:-3]
        assert np.max(np.abs(inner)) <= 1e-12
        assert np.max(np.abs(gdil[:, :, 3:-3, 3:-3])) <= 1e-12

    def test_tape_integration(self, f64):
        # gradients flow to x and all parameter tensors through the tape op
        rng = np.random.default_rng(13)
        xd = rng.normal(size=(1, 2, 4, 4))
        x = Tensor(xd, requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        off = Tensor(0.5 * rng.normal(size=(1, 18, 4, 4)), requires_grad=True)
        dil = Tensor(0.3 * rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        with Graph() as g:
            out = sdc_forward(x, SdcParams(weight=w, offsets=off, dil_raw=dil))
            loss = (out * out).sum()
        g.backward(loss)
        for t in (x, w, off, dil):
            assert t.grad is not None and np.any(t.grad != 0)


class TestPredictor:
    def test_initialised_as_standard_conv(self, f64):
        rng = np.random.default_rng(20)
        head = init_predictor(c_in=4, k=3)
        weight = Tensor(rng.normal(size=(4, 4, 3, 3)))
        feats = Tensor(rng.normal(size=(2, 4, 6, 6)))
        p = predict_params(feats, weight, head)
        eta = np.logaddexp(0, p.dil_raw.data)
        assert np.max(np.abs(eta - 1.0)) <= 1e-6
        assert np.all(p.offsets.data == 0)
        out = sdc_forward(feats, p).data
        ref = T.conv2d(feats, weight, pad=1).data
        assert rel_err(out, ref) <= 1e-6

    def test_zero_weights_bias_only(self, f64):
        head = init_predictor(c_in=3, k=3)
        head.dil_b.data[:] = 0.7
        feats = Tensor(np.random.default_rng(21).normal(size=(1, 3, 4, 4)))
        p = predict_params(feats, Tensor(np.zeros((1, 3, 3, 3))), head)
        eta = np.logaddexp(0, p.dil_raw.data)
        expect = np.logaddexp(0, 0.7)
        assert np.max(np.abs(eta - expect)) <= 1e-7

    def test_sgd_step_moves_dil_against_gradient(self, f64):
        rng = np.random.default_rng(22)
        feats_d = rng.normal(size=(1, 3, 4, 4))
        head = init_predictor(c_in=3, k=3)
        weight = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        # target chosen so dilation gradient is nonzero
        target = rng.normal(size=(1, 2, 4, 4))
        feats = Tensor(feats_d)
        with Graph() as g:
            p = predict_params(feats, weight, head)
            out = sdc_forward(feats, p)
            r = out - Tensor(target)
            loss = (r * r).sum()
        g.backward(loss)
        assert np.any(head.dil_b.grad != 0)
        lr = 1e-2
        before = head.dil_b.data.copy()
        head.dil_b.data[:] = head.dil_b.data - lr * head.dil_b.grad
        moved = head.dil_b.data - before
        nz = head.dil_b.grad != 0
        assert np.all(np.sign(moved[nz]) == -np.sign(head.dil_b.grad[nz]))


class TestParamsValidation:
    def test_wrong_offset_channels(self):
        with pytest.raises(ShapeError):
            SdcParams(weight=Tensor(np.zeros((1, 1, 3, 3))),
                      offsets=Tensor(np.zeros((1, 4, 2, 2))),
                      dil_raw=Tensor(np.zeros((1, 2, 2, 2))))

    def test_even_kernel(self):
        with pytest.raises(ShapeError):
            SdcParams(weight=Tensor(np.zeros((1, 1, 2, 2))),
                      offsets=Tensor(np.zeros((1, 8, 2, 2))),
                      dil_raw=Tensor(np.zeros((1, 2, 2, 2))))

    def test_mismatched_extents(self):
        with pytest.raises(ShapeError):
            SdcParams(weight=Tensor(np.zeros((1, 1, 3, 3))),
                      offsets=Tensor(np.zeros((1, 18, 2, 2))),
                      dil_raw=Tensor(np.zeros((1, 2, 3, 3))))


class TestOutOfRangeGradients:
    def test_far_taps_contribute_zero_to_every_family(self, f64):
        # one tap pushed far outside the raster: its offset gradients vanish,
        # its kernel-position weight gradient vanishes, and the input
        # gradient equals that of the remaining taps alone
        rng = np.random.default_rng(30)
        n, c, co, h, w = 1, 2, 2, 5, 5
        xd = rng.normal(size=(n, c, h, w))
        wd = rng.normal(size=(co, c, 3, 3))
        offd = 0.3 * rng.normal(size=(n, 18, h, w))
        far_tap = 4  # centre tap
        offd[:, 2 * far_tap] = 100.0
        offd[:, 2 * far_tap + 1] = 100.0
        dild = 0.2 * rng.normal(size=(n, 2, h, w))
        gout = rng.normal(size=(n, co, h, w))
        p = SdcParams(Tensor(wd), Tensor(offd), Tensor(dild))
        gx, gw, goff, gdil = sdc_backward(Tensor(xd), p, gout)
        assert np.all(goff[:, 2 * far_tap] == 0)
        assert np.all(goff[:, 2 * far_tap + 1] == 0)
        ki, kj = far_tap // 3, far_tap % 3
        assert np.all(gw[:, :, ki, kj] == 0)

        # zeroing that tap's kernel weight must not change grad_x
        wd2 = wd.copy()
        wd2[:, :, ki, kj] = 0.0
        gx2, _, _, _ = sdc_backward(
            Tensor(xd), SdcParams(Tensor(wd2), Tensor(offd), Tensor(dild)), gout)
        np.testing.assert_array_equal(gx, gx2)
