"""One-shot unsupervised domain adaptation for semantic segmentation, in numpy.

A small reverse-mode autodiff core drives a toy segmentor. Adaptation to a
single unlabelled target image combines parameter-free style mixing of
feature statistics with patch-prototype confidence weighting of the source
loss. A procedural two-domain benchmark makes the effect measurable.
"""

from .adapt import AdaptConfig, AdaptResult, ablation_suite, adapt_one_shot, pretrain_source, run_protocol
from .benchdata import Dataset, DomainSpec, build_benchmark, evaluate, load_dataset, save_dataset
from .errors import ConfigError, NumericalError, ShapeError
from .segmentor import SegmentorConfig, forward, init_params, load_checkpoint, save_checkpoint
from .stylemix import StyleMixer, channel_stats, stylize
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
