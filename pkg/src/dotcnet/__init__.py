"""Dual-order texture competition network in plain numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, load_image_dataset, split_dataset, synth_textures
from .dtcm import DTCMConfig, competitive_code, dtcm_forward, triplet_attention
from .errors import CheckpointError, ConfigError, DotcError, ProtocolError, ShapeError, TrainingDiverged
from .evaluation import ScoreSet, build_scores, compute_eer, match_score, roc_curve
from .gabor import GaborBank, GaborFilterParams, lgf_forward, make_bank, render_kernel
from .network import NetConfig, embed, init_network, net_forward
from .tensor import Tensor, backward
from .training import TrainConfig, train

__version__ = "0.1.0"
