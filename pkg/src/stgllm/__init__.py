"""Spatial-temporal forecasting with a frozen GPT-2 style backbone.

Each graph node becomes one token (its recent history plus calendar
embeddings); a linear adapter maps tokens into and out of the backbone, of
which only positional embeddings and layer norms are fine-tuned.
"""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    Scaler,
    SeriesDataset,
    SplitSpec,
    WindowSample,
    WindowSet,
    calendar_indices,
    generate_synthetic,
    load_dataset,
    sample_few_shot,
    save_dataset,
    split_and_window,
)
from .backbone import BackboneConfig, GPT2Backbone  # noqa: E402
from .pipeline import VARIANTS, ForecastModel, ModelConfig, predict, predict_batch  # noqa: E402
from .params import count_parameters, load_checkpoint, save_checkpoint  # noqa: E402
from .evaluation import baseline_forecast, build_variant, compute_metrics  # noqa: E402
from .training import TrainConfig, huber_loss, train  # noqa: E402
