"""Working-API reconstruction and privacy-leak accounting for Android ad libraries."""

__version__ = "0.1.0"
