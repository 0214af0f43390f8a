"""Coarse-to-fine self-supervised monocular depth training toolkit.

Trains depth and ego-motion networks from monocular clips without ground
truth: a coarse stage excludes dynamic-class objects from the reprojection
loss and supervises their depth through the ground pixels they stand on, then
a fine stage refines detail under a cost-volume-weighted consistency
regularizer. A synthetic ray-traced scene generator provides exact oracles for
verification at desk scale.
"""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, RigidTransform  # noqa: F401
from .losses import LossWeights  # noqa: F401
from .config import TrainConfig  # noqa: F401
