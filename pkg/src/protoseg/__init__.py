"""Zero-shot open-vocabulary point-cloud labeling from prototype features."""

__version__ = "0.1.0"
