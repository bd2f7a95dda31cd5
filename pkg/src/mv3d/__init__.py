"""Multi-view camera 3D perception at toy scale.

Temporal 3D position embeddings, a joint detection and BEV segmentation
decoder, a synthetic driving-scene simulator and a sensor-error benchmark,
all on top of a small float64 reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
