"""Supervised orthonormal projections of vector and tensor data with a neural prediction head."""
from .tensor import (ShapeError, SparseBatch, SparseTensor, fold, frob_norm, inner, khatri_rao,
                     matricize, mode_product, multi_mode_product, outer, tensor_times_kr,
                     vectorize)
from .stiefel import (LatentFactor, RankDeficientError, SvdConvergenceError, SvdFactors,
                      manifold_grad, orthonormalize, thin_svd)
from .model import (LossParts, MlpHead, TripModel, head_output, load_model, loss, predict,
                    predict_projected, project, reconstruction_error, save_model)
from .training import TrainConfig, TrainingError, TrainLog, gradients, train
from .interpret import (LrcResult, RotationSet, SurrogateModel, export_decision_grid,
                        fit_surrogate, lrc, rotation)
from .metrics import accuracy, auc, rmse
from .data import (CvPlan, CvResult, Dataset, FormatError, ModelSpec, NormStats, evaluate,
                   fit_model, gen_preset, gen_random_tensor, gen_spiral, load_dense_csv,
                   load_sparse_tensor, normalize, pca_baseline, run_cv, save_dense_csv,
                   save_sparse_tensor)

__version__ = "0.1.0"
