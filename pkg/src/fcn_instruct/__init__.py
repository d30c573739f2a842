"""FCN instruction tuning at desk scale: connectivity matrices, a graph encoder,
a toy decoder LM, instruction synthesis, evaluation and attention biomarkers."""

__version__ = "0.1.0"
