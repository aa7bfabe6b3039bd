"""Monocular height estimation toolkit.

A numpy library implementing a scale-deformable convolution operator with
fully analytic gradients, scale-invariant / ranking / multi-scale-gradient
training losses and their paired evaluation metrics, a procedural aerial
scene generator with controllable domain shift, and a seeded few-shot
cross-dataset transfer benchmark, all on a minimal reverse-mode tape.
"""

import os as _os

# MHE_THREADS caps kernel (BLAS) parallelism; must land before numpy spins
# up its thread pools, hence here at package import
if "MHE_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MHE_THREADS"])

from .errors import (CheckFailure, ConfigError, DataError, DivergenceError,
                     MheError, ShapeError)
from .tensor import (Graph, Tensor, conv2d, default_dtype, diff, precision,
                     resize_avg, set_default_dtype, softplus_inverse, take,
                     upsample_nearest)
from .sdc import (SdcParams, SdcPredictor, init_predictor, predict_params,
                  sdc_backward, sdc_forward, sdc_layer, sdc_oracle, tap_grid)
from .losses import (LossConfig, OrdinalPair, loss_mse, loss_msg, loss_rank,
                     loss_si, loss_total, sample_pairs)
from .metrics import (MetricsReport, evaluate_pairs, evaluate_split, metric_mae,
                      metric_msge, metric_rmse, metric_si_rmse)
from .model import (Checkpoint, HeightRegressor, ModelSpec, SGD, TrainConfig,
                    calibrate_head_bias, checkpoint_of, init_from,
                    load_checkpoint, save_checkpoint, train)
from .synthdata import (CAMERA_HEIGHTS, PRESETS, DatasetManifest, SceneSpec,
                        generate_dataset, generate_scene, subsample_fewshot)
from .protocol import (CellKey, ExperimentPlan, ResultTable, emit_tables,
                       ensure_datasets, run_fewshot, run_plan, run_pretrain,
                       run_zeroshot)
from .gradcheck import GradcheckReport, run_all as run_gradcheck

__version__ = "0.1.0"
