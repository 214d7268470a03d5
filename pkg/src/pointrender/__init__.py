"""Point-cloud pre-training via differentiable SDF volume rendering.

RGB-D views are lifted to a colored point cloud, encoded into a
hierarchical feature volume, and rendered back through an occlusion-aware
SDF volume renderer; the five-part rendering loss trains the encoder,
volume, and decoders end to end. The trained field renders novel views and
yields meshes through marching cubes.
"""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend  # noqa: F401
