"""PlantDet: hybrid C3 / shifted-window-attention one-stage detector."""

__version__ = "0.1.0"
