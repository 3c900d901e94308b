"""d2csg: recover compact quadric CSG programs from meshes and point clouds."""

__version__ = "0.1.0"
