"""Diffusion-policy pretraining and one-step distillation on desk-scale tasks."""

__version__ = "0.1.0"
