"""Whole-body motion generation with diffusion over a body-part graph.

The package is organised bottom-up:

- ``rotations``     axis-angle / matrix / 6D rotation conversions
- ``motion``        the packed per-frame motion vector and its file format
- ``topology``      body-part partition of the motion vector and per-part codecs
- ``attention``     the part-graph attention layer (static / dynamic / temporal
                    branches plus a mixture-of-experts feed-forward)
- ``diffusion``     DDPM schedule, sampling loop, and outpainting
- ``backbone``      the denoiser assembled from the pieces above
- ``control``       plug-in branch for low-level condition signals
- ``conditioning``  condition tracks, segmentation, captions, toy text embedder
- ``metrics``       FID / diversity / R-precision / beat alignment / face error
- ``retrieval``     the small VAE embedder used by the metrics
- ``synthetic``     deterministic synthetic corpora for tests and demos
- ``checkpoint``    named-tensor checkpoint container
- ``training``      two-stage trainer and the evaluation suite
- ``cli``           command-line entry point
"""

__version__ = "0.1.0"
