"""Dual-branch PET/CT 3-D CNN for distant-metastasis prediction, built on a small numpy autodiff core."""

__version__ = "0.1.0"
