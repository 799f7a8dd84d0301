"""Precipitation nowcasting with convolutional and ConvLSTM encoder-decoders.

Pure numpy: explicit forward/backward passes, Adam training, persistence and
per-pixel regression baselines, and categorical/continuous skill scores.
"""

from .errors import (ConfigError, DataError, DimensionError, FormatError, IntegrityError,
                     LengthError, NowcastError, NumericError)
from .grid import (GridFrame, Sample, Sequence, SynthConfig, WindowConfig, decode_sequence,
                   encode_sequence, inverse_transform, read_sequence, synthesize,
                   synthesize_events, transform, window, write_sequence)
from .models import ModelConfig, ModelKind, build_model

__version__ = "0.1.0"
