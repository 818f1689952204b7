"""filtergraft: transplant and freeze depthwise-separable convolution filters
across models, datasets, and architectures, then measure what survives."""

__version__ = "0.1.0"
