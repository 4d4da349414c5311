"""Multimodal multi-instance learning for liver fibrosis and NAS component scoring from CT and pathology bags."""

__version__ = "0.1.0"
