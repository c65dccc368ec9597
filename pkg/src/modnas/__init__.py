"""Differentiable search over unfolded U-net denoisers, built on a small numpy autodiff engine.

Modules:

* :mod:`modnas.autodiff` - tensors, convolution primitives, reverse-mode gradients
* :mod:`modnas.optim` - parameter stores, ADAM, cosine schedule, checkpoint container
* :mod:`modnas.search_space` - candidate operations, relaxations, the supernet
* :mod:`modnas.engine` - alternating search, checkpoints, training and evaluation loops
* :mod:`modnas.derivation` - discrete architecture extraction and derived networks
* :mod:`modnas.metrics` - PSNR, SSIM, parameter and MAC counting
* :mod:`modnas.io` - PGM files, noise synthesis, patch sampling, bundled images
* :mod:`modnas.cli` - the ``modnas`` command
"""

from .autodiff import Tensor, backward, no_grad
from .derivation import (
    DerivedArch,
    WidthDerivationConfig,
    derive_architecture,
    derive_depth,
    derive_operation,
    derive_width,
    export_arch,
    import_arch,
    instantiate_derived,
    load_fixture,
)
from .engine import SearchConfig, TrainConfig, checkpoint_load, checkpoint_save, run_search, split_dataset
from .metrics import MetricsConfig, MetricsReport, count_macs, count_params, psnr, ssim
from .optim import OptimizerConfig, ParamStore, adam_step, cosine_lr
from .search_space import Supernet, SupernetConfig, UNetSpec

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "DerivedArch", "WidthDerivationConfig", "derive_architecture", "derive_depth", "derive_operation",
    "derive_width", "export_arch", "import_arch", "instantiate_derived", "load_fixture",
    "SearchConfig", "TrainConfig", "checkpoint_load", "checkpoint_save", "run_search", "split_dataset",
    "MetricsConfig", "MetricsReport", "count_macs", "count_params", "psnr", "ssim",
    "OptimizerConfig", "ParamStore", "adam_step", "cosine_lr",
    "Supernet", "SupernetConfig", "UNetSpec",
]
