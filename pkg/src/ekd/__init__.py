"""Evolving knowledge distillation for small translation models.

A self-contained stack: a numpy gradient-tape engine, an encoder-decoder
transformer, a byte-pair-encoding text pipeline, distillation objectives,
an Adam trainer with binary checkpoints, beam-search decoding with corpus
BLEU, and an orchestrator that chains capacity-ascending teachers.
"""

from __future__ import annotations

__version__ = "0.1.0"
