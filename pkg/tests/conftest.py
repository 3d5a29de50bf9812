import numpy as np
import pytest

from splatflight.geom import CameraIntrinsics, Quat, RigidTransform, quat_multiply
from splatflight.splat import Box, Sphere, generate_synthetic_scene


def small_intrinsics(width=160, height=120, f=100.0):
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)


def qvga_intrinsics():
    return CameraIntrinsics(fx=220.0, fy=220.0, cx=160.0, cy=120.0, width=320, height=240)


def make_room_scene(n_gaussians: int, seed: int, extra_spheres: int = 3):
    """A closed box room (6 m x 5 m x 3 m) with some colored spheres inside.

    The drone/camera frame has z pointing down, so the room spans z in
    [-3, 0] with the "floor" at z = 0.
    """
    rng = np.random.default_rng(seed + 1000)
    prims = [Box(np.array([0.0, 0.0, -1.5]), np.array([6.0, 5.0, 3.0]), np.array([0.75, 0.72, 0.68]))]
    for _ in range(extra_spheres):
        prims.append(
            Sphere(
                center=rng.uniform([-2.0, -1.5, -2.2], [2.0, 1.5, -0.4]),
                radius=rng.uniform(0.25, 0.6),
                color=rng.uniform(0.1, 1.0, size=3),
            )
        )
    area = sum(p.surface_area() for p in prims)
    density = n_gaussians / area
    scene = generate_synthetic_scene(prims, density=density, seed=seed, background=(0.05, 0.05, 0.08))
    return scene


def random_room_pose(rng) -> RigidTransform:
    """Camera/body pose inside the room with a mostly-level random heading."""
    position = rng.uniform([-1.5, -1.0, -2.2], [1.5, 1.0, -0.8])
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    pitch = rng.uniform(-0.35, 0.35)
    # Tip the body z axis (camera boresight) from straight down to roughly level,
    # then pick a random heading.
    q = quat_multiply(
        Quat.from_axis_angle([0.0, 0.0, 1.0], yaw),
        Quat.from_axis_angle([0.0, 1.0, 0.0], np.pi / 2 + pitch),
    )
    return RigidTransform(q.normalized(), position)


@pytest.fixture(scope="session")
def warm_kernels():
    """Compile the hot numba kernels once up front so timings in tests are honest."""
    from splatflight.splat import render
    from splatflight.splat.scene import SplatScene

    scene = make_room_scene(200, seed=0, extra_spheres=0)
    pose = RigidTransform(Quat.identity(), np.array([0.0, 0.0, -1.5]))
    render(scene, pose, RigidTransform.identity(), small_intrinsics(), workers=1)
    return True
