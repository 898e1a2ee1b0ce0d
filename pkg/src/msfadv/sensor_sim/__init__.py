from .types import BehindCameraError, Calibration, LidarSpec, PointCloud, SensorError, SensorImage
from .lidar import (
    LidarRender,
    RayTable,
    candidate_rays,
    hit_points,
    nearest_hits,
    ray_triangle_intersect,
    render_lidar,
    render_lidar_diff,
)
from .camera import (
    CameraRender,
    DEFAULT_ALBEDO,
    face_shading,
    project_point,
    project_points,
    render_camera,
    render_camera_diff,
)
from .io import quantize_image, quantize_points, read_bin, read_calib, read_ppm, write_bin, write_calib, write_ppm
