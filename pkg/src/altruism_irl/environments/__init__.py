from .kitchen import (
    COMPACT_LAYOUT,
    REFERENCE_LAYOUT,
    KitchenCodec,
    KitchenLayout,
    build_kitchen,
    chef_intrinsic_reward,
    parse_layout,
)
from .random_mg import RandomMgConfig, generate_random_mg

__all__ = [
    "COMPACT_LAYOUT",
    "REFERENCE_LAYOUT",
    "KitchenCodec",
    "KitchenLayout",
    "RandomMgConfig",
    "build_kitchen",
    "chef_intrinsic_reward",
    "generate_random_mg",
    "parse_layout",
]
