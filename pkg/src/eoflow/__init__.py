"""Normalizing flows with manifold entropic losses and metrics, on a numpy autodiff core."""

from .errors import (CheckpointError, ConfigError, DataFormatError, DegenerateGeometryError,
                     EOFlowError, NumericalError, ShapeError)
from .flow import (FlowModel, affine_model, build_model, decode, decoder_jacobian_column,
                   decoder_jacobian_dense, encode, load_checkpoint, save_checkpoint)
from .losses import (IndexSet, LossBreakdown, mml_loss, nll_ml, pointwise_manifold_entropy,
                     pointwise_mmi, pointwise_total_correlation, stochastic_tc_batch)
from .metrics import (EntropySpectrum, MPMIMatrix, entropy_spectrum, manifold_entropy,
                      manifold_total_correlation, mpmi_matrix)

__version__ = "0.1.0"
