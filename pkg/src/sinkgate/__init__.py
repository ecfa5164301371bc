"""Sink-aware routing for grouped-query decode attention.

Decode-time KV groups whose queries align with the cached first-token key are
answered with a zero output and never load their K/V history; all other
groups run exact split-K attention.
"""

from .attention import (attention_weights, dense_attention, merge_partials, online_attention,
                        splitk_attention)
from .calibration import calibrate, fit_cubic, solve_threshold, sweep
from .counters import LoadCounters
from .kv_cache import CacheConfig, GroupAnchor, KvCache
from .profile import ThresholdProfile, load_profile, save_profile, threshold_for_length
from .router import RoutingConfig, Verdict, route, routed_decode_step
from .tensor_store import random_tensor, read_tensor, write_tensor

__version__ = "0.1.0"
