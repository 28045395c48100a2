import numpy as np

from .ops import conv2d, conv_output_width, dropout, linear, prelu, weight_norm
from .optim import AdamState, adam_step
from .serialize import (FEATURE_MAGIC, WeightFileError, dumps_weights, load_weights, loads_weights,
                        save_weights)
from .tensor import (DimensionError, Node, Tape, Tensor, active_tape, add, as_tensor, backward,
                     concat, div, getitem, log_softmax, mul, reshape, sqrt, sub, tmean, transpose, tsum)


def make_rng(seed, *stream) -> np.random.Generator:
    """PCG64 generator for ``seed``, optionally split into a named sub-stream.

    ``make_rng(seed, fold, sample)`` gives a stream that depends only on those
    integers, so parallel workers reproduce the sequential result.
    """
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.PCG64(ss))
