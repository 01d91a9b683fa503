"""Two-stage monocular spacecraft pose estimation.

A translation network (position regression aided by heatmap localization)
predicts ``t`` and the image center of the target; the center and depth define
a square ROI that an orientation network turns into a unit quaternion.
"""

__version__ = "0.1.0"
