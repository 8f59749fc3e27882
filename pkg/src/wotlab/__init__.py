"""wotlab: adversarial training with weighted optimization trajectories (WOT)."""
from .attacks import AttackConfig, fgsm, input_landscape, pgd, robust_accuracy, weight_landscape
from .baselines import AveragerState, BestTracker, ema_update, swa_update, track_best
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config
from .data import Dataset, SplitSpec, holdout_split, load_cifar_binary, load_idx, synth_blobs
from .kernels import BACKEND as KERNEL_BACKEND
from .losses import at_loss, mart_loss, trades_loss
from .models import BlockPartition, ModelSpec, block_partition, build_model, param_delta
from .tensor import GradTape, ParamVector, Tensor, backward
from .train import eval_suite, run_training
from .wot import AlphaState, TrajectoryBuffer, alpha_gradient, alpha_step, compose_delta, refine

__version__ = "0.1.0"
