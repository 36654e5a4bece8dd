"""Four-stage multi-task visual imitation learning on a 2D kitchen simulator."""

__version__ = "0.1.0"
