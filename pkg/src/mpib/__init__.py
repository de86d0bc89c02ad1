"""Mixed-precision dual-head audio embeddings.

A 16-bit trait head carries stable speaker identity; a packed 4-bit state head
carries short-lived vocal state. The capacity gap between the two (1,024 vs 128
bits) is the privacy mechanism: identity does not fit through the narrow head.
"""

__version__ = "0.1.0"
