"""Probabilistic deep metric learning for patch-based hyperspectral pixel classification."""

from .data import (DatasetSplit, HsiCube, LabelMap, LapIndex, PatchBatch, SynthSpec,
                   extract_patch, lap_index, load_cube, load_labels, make_batches,
                   save_cube, save_labels, standardize, stratified_split, synth_cube)
from .errors import (CheckpointError, ConfigError, IngestError, NumericError, PdmlError,
                     RenderError, SplitError)
from .grad import ParamStore, eval_loss_and_grads, finite_diff_check
from .losses import LossConfig, pdml_objective, total_loss
from .metrics import Metrics, evaluate
from .model import BackboneConfig, GaussianField, forward, init_params, predict
from .train import TrainConfig, rmsprop_step, train

__version__ = "0.1.0"
