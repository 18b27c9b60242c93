"""mapbench: benchmarking toolkit for 2D occupancy maps used in mobile-robot
localization — map-quality metrics, Monte Carlo localization replay, a
simulation harness for survey/SLAM/contour-style map generation, and
quality-to-effort reporting."""

__version__ = "0.1.0"
