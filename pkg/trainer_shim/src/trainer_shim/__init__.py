"""Minimal integration between a GRPO training loop and the reward service.

The shim is pure transport: it posts completion groups to the service's
/v1/score endpoint and hands back the scalar composites, and it loads
exported SFT pairs. It performs no reward math of its own and depends only
on the published HTTP and file contracts.
"""

from .shim import (
    RewardCallback,
    ShimConfig,
    ShimConfigurationError,
    ShimDatasetError,
    ShimError,
    ShimTransportError,
    load_sft_dataset,
    reward_callback,
)

__all__ = [
    "RewardCallback",
    "ShimConfig",
    "ShimConfigurationError",
    "ShimDatasetError",
    "ShimError",
    "ShimTransportError",
    "load_sft_dataset",
    "reward_callback",
]
