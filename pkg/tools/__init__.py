"""Tools module: experiment command implementations"""

# Import all tool implementations
from .synth import synth_impl
from .gan_training import train_gan_impl
from .detector_training import train_detector_impl, eval_impl
from .ablation import ablate_impl
from .noise import noise_eval_impl
from .transfer import transfer_impl
from .report import emit_report

__all__ = [
    # Data
    'synth_impl',
    # Training
    'train_gan_impl',
    'train_detector_impl',
    # Evaluation
    'eval_impl',
    'noise_eval_impl',
    # Experiments
    'ablate_impl',
    'transfer_impl',
    # Reporting
    'emit_report',
]
