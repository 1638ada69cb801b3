"""Weight-only quantization of a toy multimodal decoder and selective-prediction reliability metrics."""

__version__ = "0.1.0"
