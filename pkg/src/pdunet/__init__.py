"""Progressive-dilated UNet segmentation engine.

From-scratch multi-class segmentation: network layers with hand-derived
backward passes, declarative UNet-family architectures, receptive-field
and gridding analysis, overlap/surface metrics with significance testing,
a synthetic phantom benchmark and a training/evaluation CLI.
"""

__version__ = "0.1.0"

from .tensor import Shape, Tensor, zeros, elementwise, reduce  # noqa: F401
from .arch import MODEL_NAMES, Model, NetSpec  # noqa: F401
from .rfield import (compose_rf, effective_kernel,  # noqa: F401
                     gridding_coverage, network_rf)
from .metrics import (LabelMap, MetricReport, assd, dsc,  # noqa: F401
                      wilcoxon_one_tailed)
from .phantom import PhantomConfig, generate, split  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
from .train import train_model  # noqa: F401
