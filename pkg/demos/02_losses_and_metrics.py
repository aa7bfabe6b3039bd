"""The four training objectives and their paired evaluation metrics.

Height maps are mostly zero (ground), so the relative-height terms work on
raw heights, not log heights. The scale-invariant term and SI-RMSE share
one kernel; the multi-scale gradient term and MSGE share another.
"""

import numpy as np

from mhe import (LossConfig, Tensor, loss_mse, loss_msg, loss_rank, loss_si,
                 loss_total, metric_mae, metric_msge, metric_rmse,
                 metric_si_rmse, precision, sample_pairs)

rng = np.random.default_rng(7)

with precision("f64"):
    gt = np.abs(rng.normal(size=(1, 1, 16, 16))) * 5
    pred = gt + rng.normal(size=gt.shape)

    print("mse :", float(loss_mse(Tensor(pred), Tensor(gt)).data))
    print("si  :", float(loss_si(Tensor(pred), Tensor(gt)).data))
    print("msg :", float(loss_msg(Tensor(pred), Tensor(gt)).data))

    # the scale-invariant and gradient terms ignore a global height bias;
    # plain mse does not
    shifted = pred + 10.0
    print("\nafter adding a 10 m bias to the prediction:")
    print("mse :", float(loss_mse(Tensor(shifted), Tensor(gt)).data))
    print("si  :", float(loss_si(Tensor(shifted), Tensor(gt)).data))
    print("msg :", float(loss_msg(Tensor(shifted), Tensor(gt)).data))

    # ordinal pairs: two pixels, labelled by which ground truth is higher
    # (threshold 0.25 m); the ranking loss scores predicted margins
    pairs = sample_pairs(gt, n_pairs=8, threshold=0.25, rng=np.random.default_rng(0))
    print("\nfirst sampled pairs (i, j, label):", pairs[:3])
    print("rank:", float(loss_rank(Tensor(pred), pairs).data))

    # the combined objective is mse plus the configured relative term
    cfg = LossConfig(variant="si")
    print("total(si):", float(loss_total(Tensor(pred), Tensor(gt), cfg).data))

    # metrics reuse the loss kernels, so loss and metric agree exactly
    print("\nmetrics: mae", metric_mae(pred, gt), "rmse", metric_rmse(pred, gt))
    print("si-rmse == loss_si:",
          metric_si_rmse(pred, gt) == float(loss_si(Tensor(pred), Tensor(gt)).data))
    print("msge    == loss_msg:",
          metric_msge(pred, gt) == float(loss_msg(Tensor(pred), Tensor(gt)).data))
