from .metrics import (chamfer_distance_metric, chamfer_loss, deformation_magnitude,
                      procrustes, rigid_residuals, rmse, tre)
from .neighbors import BACKEND, KDTree, brute_force, nearest_neighbors
from .pointset import (COMPARTMENTS, REGIONS, GeometryError, LandmarkPair, PointSet,
                       RigidTransform, read_landmarks, read_pointset, read_vectors,
                       write_landmarks, write_pointset, write_vectors)

__all__ = [
    "BACKEND", "COMPARTMENTS", "REGIONS", "GeometryError", "KDTree", "LandmarkPair",
    "PointSet", "RigidTransform", "brute_force", "chamfer_distance_metric", "chamfer_loss",
    "deformation_magnitude", "nearest_neighbors", "procrustes", "read_landmarks",
    "read_pointset", "read_vectors", "rigid_residuals", "rmse", "tre", "write_landmarks",
    "write_pointset", "write_vectors",
]
