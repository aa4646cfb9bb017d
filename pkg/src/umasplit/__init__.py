"""UMA-Split: unimodal aggregation with a split module for CTC transduction."""

from .autodiff import Tensor, backward, finite_difference_check
from .ctc import CTCIncomputable, ctc_loss, ctc_loss_bruteforce, greedy_decode
from .data import Sample, SynthConfig, generate_sample, read_dataset, write_dataset
from .model import ModelConfig, UmaSplitModel, load_checkpoint, save_checkpoint, total_loss
from .uma import UmaSegmentation, aggregate, find_valleys

__version__ = "0.1.0"
