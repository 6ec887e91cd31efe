"""Atlas-guided test-time adaptation for 3D segmentation."""

__version__ = "0.1.0"
