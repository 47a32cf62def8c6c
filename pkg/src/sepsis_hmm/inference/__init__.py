from .data import CohortArrays
from .decode import DecodeConfig, DecodeResult, decode, decode_cohort, forward_backward
from .kde import kde_map, map_params, silverman_bandwidth
from .kernels import ImpossiblePathError
from .sampler import InitializationError, PosteriorChain, SamplerConfig, init_chain, run_sampler

__all__ = [
    "CohortArrays",
    "DecodeConfig",
    "DecodeResult",
    "ImpossiblePathError",
    "InitializationError",
    "PosteriorChain",
    "SamplerConfig",
    "decode",
    "decode_cohort",
    "forward_backward",
    "init_chain",
    "kde_map",
    "map_params",
    "run_sampler",
    "silverman_bandwidth",
]
