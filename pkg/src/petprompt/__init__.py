"""Count-level-aware dual-prompt denoising for 3D low-count volumes."""

from .data import Volume3D, build_dataset, generate_phantom, load_volume, save_volume, simulate_counts
from .metrics import ensemble_stats, mae, mse, psnr, ssim3d
from .model import ModelConfig, PromptUNet, count_parameters
from .training import TrainConfig, denoise, l1_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
