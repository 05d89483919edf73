"""Compressed-domain action recognition at desk scale.

Block-motion fields recovered from an emulated video codec stand in for
optical flow as CNN input; teacher-student transfer (initialization,
temperature-softened supervision, or both) closes most of the accuracy
gap while decoding stays orders of magnitude cheaper than flow.
"""

from . import bench, cli, distill, motion, nn, pipeline, videoio

__all__ = ["bench", "cli", "distill", "motion", "nn", "pipeline", "videoio"]
__version__ = "0.1.0"
