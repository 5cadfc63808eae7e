"""Channel-boosted CT slice detection and lesion segmentation on a numpy autograd core."""

from .models import (
    CovidCbResegConfig,
    SbStmBrNetConfig,
    build_classifier,
    build_segmenter,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import RngState, Tensor, backward, no_grad

__version__ = "0.1.0"
