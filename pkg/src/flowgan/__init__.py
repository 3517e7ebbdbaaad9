"""Scenario-conditioned origin-destination flow generation toolkit.

Submodules:
  dynmap     multi-resolution dynamic maps (build, locate, documents)
  mobility   trajectory ingestion, trip extraction, OD aggregation, synthesis
  codec      flow matrix <-> normalized 64x64 image encoding
  tensorgrad minimal reverse-mode autodiff kernels (conv, batchnorm, Adam)
  model      conditional GAN (generator/discriminator, training, sampling)
  checkpoint versioned binary model persistence
  gravity    gravity-model baseline calibration and prediction
  metrics    checksum, PSNR, SSIM, CPC evaluation battery
  cli        command-line pipeline harness
"""

__version__ = "0.1.0"
