"""Dilated-convolution sequence-to-point energy disaggregation on a
hand-written differentiation core."""
__version__ = "0.1.0"

from .autodiff import Tensor  # noqa: E402
from .models import ModelConfig, TrainedModel, build_cnn, build_model, build_rnn, build_wavenet  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = ["Tensor", "ModelConfig", "TrainedModel", "TrainConfig", "build_cnn", "build_model", "build_rnn",
           "build_wavenet", "train", "__version__"]
