"""lumafeat: illumination-robust keypoint/descriptor extraction trained on
relightable synthetic scenes.

The pipeline builds procedural Gaussian-splat objects with BRDF attributes,
renders them under controlled illumination sweeps, supervises a
SuperPoint-style extractor with 3D-grounded keypoint labels, and trains with
repeatability / similarity / disparity losses. See the CLI (`lumafeat`) for
the end-to-end stages.
"""

__version__ = "0.1.0"
