import numpy as np
import pytest

from mhe import tensor as T
from mhe.errors import CheckFailure, ConfigError
from mhe.gradcheck import (fd_gradient_guarded, mutated, run_all, run_or_raise)
from mhe.tensor import Tensor, eval_with_kink_signature


class TestGuardedFd:
    def test_rejects_probe_across_relu_kink(self, f64):
        # evaluation point sits 1e-5 from the relu boundary; the 1e-4 probe
        # must be flagged invalid instead of producing a polluted estimate
        xd = np.array([1e-5, 1.0])

        def f():
            return float(T.relu(Tensor(xd)).sum().data)

        fd, ok = fd_gradient_guarded(f, xd, [0, 1])
        assert not ok[0]
        assert ok[1]
        assert fd[1] == pytest.approx(1.0, abs=1e-9)

    def test_rejects_probe_across_bilinear_cell(self, f64):
        from mhe.sdc import SdcParams, sdc_forward

        xd = np.arange(16.0).reshape(1, 1, 4, 4)
        offd = np.zeros((1, 18, 4, 4))
        offd[0, 8] = 0.5                   # centre tap, fractional row shift
        offd[0, 0] = 1e-5                  # corner tap sits on a cell edge
        dild = np.full((1, 2, 4, 4), T.softplus_inverse(1.0))
        wd = np.ones((1, 1, 3, 3))

        def f():
            p = SdcParams(Tensor(wd), Tensor(offd), Tensor(dild))
            return float(sdc_forward(Tensor(xd), p).data.sum())

        fd, ok = fd_gradient_guarded(f, offd, [np.ravel_multi_index((0, 0, 2, 2), offd.shape)])
        assert not ok[0]

    def test_signature_stable_for_smooth_ops(self, f64):
        xd = np.array([0.3, -1.2])

        def f():
            return float(T.softplus(Tensor(xd)).sum().data)

        _, sig1 = eval_with_kink_signature(f)
        xd[0] += 1e-4
        _, sig2 = eval_with_kink_signature(f)
        assert sig1 == sig2 == b""


class TestSuites:
    @pytest.mark.parametrize("seed", [0, 3, 8])
    def test_run_all_passes_across_seeds(self, seed):
        report = run_all(seed=seed, sdc_instances=4)
        assert report.ok, report.text()

    def test_report_lists_every_family(self):
        report = run_all(seed=0, sdc_instances=2)
        families = [r.family for r in report.rows]
        for expected in ("conv2d (x,w,bias)", "sdc input", "sdc weight",
                         "sdc offsets", "sdc dil_raw", "loss mse_only",
                         "loss rank", "model end-to-end"):
            assert expected in families
        text = report.text()
        assert "max rel err" in text and "PASS" in text

    def test_mutation_flips_only_dil_family(self):
        report = run_all(seed=0, mutate="dil_chain_sign", sdc_instances=4)
        assert not report.ok
        failing = {r.family for r in report.rows if not r.ok}
        assert failing == {"sdc dil_raw"}

    def test_run_or_raise(self):
        with pytest.raises(CheckFailure):
            run_or_raise(seed=0, mutate="dil_chain_sign")

    def test_unknown_mutation_rejected(self):
        with pytest.raises(ConfigError):
            with mutated("bogus"):
                pass

    def test_mutation_restores_sign(self):
        from mhe import sdc
        before = sdc._dil_chain_sign
        with mutated("dil_chain_sign"):
            assert sdc._dil_chain_sign == -before
        assert sdc._dil_chain_sign == before
