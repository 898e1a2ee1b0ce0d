from .mesh import (
    MeshError,
    RigidPose,
    TriMesh,
    apply_pose,
    directed_edges,
    empty_mesh,
    load_obj,
    pose_vertices,
    same_topology,
    save_obj,
    unique_edges,
    vertex_neighbors,
)
from .printability import (
    CurvatureResult,
    angle_deficits,
    euler_characteristic,
    hausdorff_distance,
    mean_gaussian_curvature,
    mixed_areas,
    point_mesh_distance,
    self_intersection_ratio,
    triangles_intersect,
    watertightness,
)
from .decimation import DecimationResult, qecd_simplify
from . import shapes
