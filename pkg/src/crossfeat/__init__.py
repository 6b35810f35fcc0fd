"""crossfeat: cross-modality local feature learning and matching.

A detect-and-describe feature network trained jointly with a supervised
loss on aligned cross-modality pairs and self-supervised losses on
randomly transformed copies of each modality, plus the augmentation
pipeline, matching metrics (NC / NCM / CMR) and sweep tooling around it.
"""

__version__ = "0.1.0"

from .transforms import (  # noqa: F401
    CorrespondenceMap,
    GeometricParams,
    Homography,
    PhotometricParams,
    TransformConfig,
    TransformSpec,
    apply_geometric,
    apply_photometric,
    apply_transform,
    chain_correspondence,
    compose_homography,
    map_points,
    sample_transform,
)
