"""Multi-camera 3D human pose fusion with semantic feedback to edge sensors."""

__version__ = "0.1.0"
