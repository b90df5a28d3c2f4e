"""Self-supervised geospatial pretraining for mineral prospectivity mapping."""

__version__ = "0.1.0"
