"""Graph pyramid autocorrelation attention for spatial-temporal traffic forecasting."""

from __future__ import annotations

__version__ = "0.1.0"

from .data import SyntheticSpec, TrafficDataset, WindowSpec, generate_synthetic, load_csv, make_windows, split, write_csv
from .model import Explanation, FeatureMapGrid, XGPAConfig, XGPAModel, extract_explanation, forward, input_coefficients
from .spatial import GraphAttentionLayer, TrafficGraph
from .temporal import AutocorrAttentionLayer, PatchAttentionLayer, PyramidOutput, pyramid_forward
from .tensor import Tensor

__all__ = [
    "AutocorrAttentionLayer",
    "Explanation",
    "FeatureMapGrid",
    "GraphAttentionLayer",
    "PatchAttentionLayer",
    "PyramidOutput",
    "SyntheticSpec",
    "Tensor",
    "TrafficDataset",
    "TrafficGraph",
    "WindowSpec",
    "XGPAConfig",
    "XGPAModel",
    "extract_explanation",
    "forward",
    "generate_synthetic",
    "input_coefficients",
    "load_csv",
    "make_windows",
    "pyramid_forward",
    "split",
    "write_csv",
]
