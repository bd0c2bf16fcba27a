"""
Rivulet - Learned Liquid Drop Simulator

Extracts B-spline contact fronts from grayscale image sequences, trains
recurrent predictors for drop motion, gradient and breakage, and simulates
drops on inclined or curved terrain with biharmonic shape reconstruction
and geometric split/merge handling.
"""

__version__ = "1.0.0"
__author__ = "Rivulet Team"
