"""Dataset tooling for aerial dead-tree detection pipelines.

Subpackages cover the non-neural stages: orthomosaic tiling, synthetic
scene generation with COCO annotations, box/mask geometry, reference
loss and optimizer numerics, and detection evaluation.
"""

__version__ = "0.1.0"

from .geom import (  # noqa: F401
    Anchor,
    AnchorAssignment,
    BBox,
    BoxDelta,
    InstanceMask,
    assign_anchors,
    decode_delta,
    encode_delta,
    generate_anchors,
    iou,
    mask_iou,
    nms,
)
