"""Why the radial sampling of a PET sinogram matters.

In a ring scanner a line of response joins two crystals, so its distance
from the centre is R sin(angle) and the bins crowd together towards the
edge of the field of view. Many reconstructors pretend they are evenly
spaced. Here three point sources at 1, 10 and 20 cm are simulated with
the true crystal chords and then reconstructed twice from the same
counts: once with rays at the true positions and once with the evenly
spaced approximation. The sources near the centre barely notice; the one
at 20 cm is blurred by the mismatch. Runs for a minute or two.

    python demos/pet_arc_correction.py
"""

import numpy as np

from gaussray import geometry, metrics, phantom
from gaussray.geometry import radial_position
from gaussray.optim import TrainConfig, reconstruct
from gaussray.volume import VolumeGrid

native = geometry.CylindricalPet(n_radial_bins=221, n_views=96)
uniform = geometry.CylindricalPet(n_radial_bins=221, n_views=96, arc_corrected=True)

print("bin   true offset   evenly spaced   difference (mm)")
for m in (110, 150, 190, 220):
    a, b = radial_position(native, m), radial_position(uniform, m)
    print(f"{m:3d}   {a:9.2f}     {b:9.2f}       {b - a:6.2f}")

counts = phantom.simulate(phantom.build_point_sources(), native).data

# Least squares turns the inconsistent traces into blur; an L1 loss would
# instead snap onto whichever trace is in the majority.
config = TrainConfig(loss="l2", iterations=2000, batch_views=8, init_n_gaussians=20000, init_scale_mm=2.0,
                     init_fov_radius_mm=225.0, init_fov_half_height_mm=3.0, init_rho_fit_iters=3,
                     init_rho_fit_subsets=8, densify_start=100, densify_interval=100, densify_grad_threshold=2e-3,
                     max_gaussians=4000)
grid = VolumeGrid.centered((41, 461, 1), 0.5, center=(0, 105, 0))
ys = grid.axis_centers(1)

print("\n                 FWHM at 1 cm   10 cm   20 cm   (mm)")
for name, geom in (("true positions", native), ("evenly spaced", uniform)):
    cloud, _ = reconstruct(phantom.ProjectionSet(geom, counts), config)
    prof = metrics.line_profile(metrics.voxelize(cloud, grid), "y", (0, 105, 0))
    widths = [metrics.fwhm(prof[np.abs(ys - y0) <= 15], 0.5) for y0 in (10, 100, 200)]
    print(f"{name:16s} " + "  ".join(f"{w:7.2f}" for w in widths))
