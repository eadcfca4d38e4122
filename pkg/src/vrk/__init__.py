"""Framework-free two-stage voxel detector: voxelization, sparse backbones,
voxel query, voxel RoI pooling, losses and evaluation."""

__version__ = "0.1.0"
