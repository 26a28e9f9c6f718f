"""Tomographic reconstruction with a mixture of 3D Gaussians.

Line integrals of each Gaussian are evaluated in closed form, so projections
and their gradients are exact up to the culling threshold of the BVH.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .model import Gaussian, GaussianCloud, Ray, Rays, load_cloud, make_ray, save_cloud
from .geometry import ConeBeam, CylindricalPet, ParallelBeam
from .projector import backproject, forward_project, integrate_ray, integrate_ray_grad, render
from .volume import VolumeGrid

__all__ = [
    "Gaussian", "GaussianCloud", "Ray", "Rays", "make_ray", "load_cloud", "save_cloud",
    "ParallelBeam", "ConeBeam", "CylindricalPet", "VolumeGrid",
    "render", "backproject", "forward_project", "integrate_ray", "integrate_ray_grad",
]
