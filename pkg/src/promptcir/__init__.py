"""Blind restoration of JPEG-compressed images.

Subpackage map:

- :mod:`promptcir.tensor`: numpy-backed tensors with tape autodiff
- :mod:`promptcir.nn`: parameter modules and basic layers
- :mod:`promptcir.jpeg`: quality-factor degradation codec
- :mod:`promptcir.imgio`: PNG/PPM/BMP reading and model-layout conversion
- :mod:`promptcir.metrics`: PSNR / SSIM / PSNR-B
- :mod:`promptcir.blocks`: channel-attention transformer blocks
- :mod:`promptcir.hat`: window-attention blocks and hybrid attention groups
- :mod:`promptcir.prompt`: dynamic prompt generation and interaction
- :mod:`promptcir.network`: the full restoration model and checkpoints
- :mod:`promptcir.data` / :mod:`promptcir.train` / :mod:`promptcir.evaluate`:
  dataset manifests, the two-stage trainer, and metric reports
- :mod:`promptcir.checks`: finite-difference verification suite
- :mod:`promptcir.cli`: the ``promptcir`` command line
"""

__version__ = "0.1.0"
