"""Band-limited weight rescaling for quantized models under RoPE position interpolation."""
from .attention import (AttentionWeights, DevSet, HiddenStates, Objective, forward_logits,
                        gen_hidden_states, make_devset, random_weights, score)
from .exceptions import ConfigError, DataError, QRoarError
from .quant import QuantSpec, RTNQuantizer, quantize_midrise, quantize_minmax
from .rope import FrequencySchedule, make_schedule, relative_rotation, rotate
from .schemes import (PIScheme, identity_scheme, linear_interpolation, longrope_scheme,
                      ntk_scheme, scaled_phase, yarn_scheme)
from .search import (BandRescaler, BandScales, SearchConfig, apply_band_scales,
                     coordinate_search, partition_bands)

__version__ = "0.1.0"
