"""Explainable flow-level intrusion detection at desk scale.

Pipeline: flow CSV -> coarse labels -> dedup -> stratified splits ->
textualized flows -> closed-vocabulary tokens -> small encoder transformer
(absolute or disentangled attention) -> class-weighted training ->
integrated-gradients attribution aggregated back to flow features.
"""

__version__ = "0.1.0"
