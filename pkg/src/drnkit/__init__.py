"""drnkit: dense residual network kit for character and string recognition.

Estimators (`DrnClassifier`, `DrnSequenceRecognizer`) expose the models
through the scikit-learn fit/predict API; the underlying pieces (tensor
autodiff, blocks, CTC, cost model, data handling, training loop) are
importable directly for finer control.
"""

from ._malloc import tune_malloc_for_large_arrays

tune_malloc_for_large_arrays()

from .blocks import (
    ConvGroupSpec,
    DenseBlockSpec,
    DownsampleSpec,
    DrnConfig,
    DrnNet,
    GdbSpec,
    RrdbSpec,
)
from .cost import CostReport, compare_blocks
from .ctc import AlphabetSpec, ctc_greedy_decode, ctc_loss
from .data import DatasetSplit, read_idx, synth_string_dataset
from .estimators import DrnClassifier, DrnSequenceRecognizer
from .rng import Rng
from .tensor import Parameter, Tape, Tensor, backward
from .train import Sgd, SgdConfig, evaluate, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AlphabetSpec",
    "ConvGroupSpec",
    "CostReport",
    "DatasetSplit",
    "DenseBlockSpec",
    "DownsampleSpec",
    "DrnClassifier",
    "DrnConfig",
    "DrnNet",
    "DrnSequenceRecognizer",
    "GdbSpec",
    "Parameter",
    "Rng",
    "RrdbSpec",
    "Sgd",
    "SgdConfig",
    "Tape",
    "Tensor",
    "backward",
    "compare_blocks",
    "ctc_greedy_decode",
    "ctc_loss",
    "evaluate",
    "fit",
    "load_checkpoint",
    "read_idx",
    "save_checkpoint",
    "synth_string_dataset",
]
