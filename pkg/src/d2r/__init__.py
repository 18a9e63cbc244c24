"""Desk-scale rearrangement engine: fuse a posed RGB-D scan into foreground and
background volumes, imagine candidate object placements by re-rendering, score
the renders against a language instruction, and plan a collision-free transit
to the best physically valid pose."""

__version__ = "0.1.0"
