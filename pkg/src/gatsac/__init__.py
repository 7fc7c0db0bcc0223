"""GAT-SAC traffic-signal control for mixed-autonomy intersections."""

__version__ = "0.1.0"
