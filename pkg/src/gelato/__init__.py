"""Frozen-tower multimodal embeddings.

Small trainable projectors align frozen encoder towers with a frozen text
backbone; training is bidirectional in-batch InfoNCE summed over nested
truncation prefixes. Checkpoints route weights dynamically by task variant
and modality.
"""

__version__ = "0.1.0"
