"""Quantization-aware training for domain generalization, at desk scale."""
