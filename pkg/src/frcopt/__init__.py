"""Simultaneous matrix-topology, fiber-density and fiber-orientation
optimization of 2D fiber-reinforced composites via a coordinate neural
field, with end-to-end differentiated finite elements and continuous
fiber track extraction."""

__version__ = "0.1.0"
