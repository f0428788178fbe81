"""graspforge: pixelwise antipodal grasp synthesis from monocular images."""

__version__ = "0.1.0"
