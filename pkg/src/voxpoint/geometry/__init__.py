from .types import NeighborIndex, PointCloud, SurfaceMesh, VoxelGrid, as_points
from .pointcloud import fps, knn, normalize_unit_cube, pairwise_sq_dists
from .voxel import mean_occupancy, occupancy_loss, voxel_iou, voxelize
from .surface import extract_surface, surface_points
from .losses import chamfer_l1, uniform_kl

__all__ = [
    "NeighborIndex", "PointCloud", "SurfaceMesh", "VoxelGrid", "as_points",
    "fps", "knn", "normalize_unit_cube", "pairwise_sq_dists",
    "mean_occupancy", "occupancy_loss", "voxel_iou", "voxelize",
    "extract_surface", "surface_points",
    "chamfer_l1", "uniform_kl",
]
