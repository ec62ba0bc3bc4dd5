"""Future BEV instance prediction on a synthetic driving world.

The package is organised as a pipeline:

- :mod:`futurebev.world` — synthetic bird's-eye-view world generator
  (kinematic agents, occupancy/velocity rasters, backward flow fields).
- :mod:`futurebev.dataset` — on-disk dataset layout, manifest, and loading.
- :mod:`futurebev.encoder` — small convolutional BEV feature encoder.
- :mod:`futurebev.predictor` — flow-guided temporal BEV predictor built on
  deformable attention.
- :mod:`futurebev.decoder` — query-based instance decoder with per-frame
  segmentation heads.
- :mod:`futurebev.matching` — Hungarian assignment, matching costs and the
  training loss.
- :mod:`futurebev.metrics` — segmentation IoU, video panoptic quality and
  auxiliary detection metrics.
- :mod:`futurebev.inference` — turning raw network outputs into per-cell
  instance id maps.
- :mod:`futurebev.trainer` — training / evaluation loops and checkpoints.
- :mod:`futurebev.cli` — the ``futurebev`` command line tool.
"""

__version__ = "0.1.0"
