"""Vector-based road-boundary mapping from LiDAR scans.

Pipeline: probabilistic grid fusion of scans into local grid maps,
virtual-scan vectorization into polylines, polyline-to-polyline
registration, concatenation into a global vector map, and pose-graph
optimization with loop closure. A synthetic scene simulator provides
ground truth for end-to-end verification.
"""

__version__ = "0.1.0"
