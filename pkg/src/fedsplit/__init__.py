"""Federated split learning for a toy LLaMA-style transformer.

The package simulates a privacy-motivated training setup where a language
model is partitioned across client and server processes: the client keeps the
embedding plus the first blocks and the final blocks with the output head, the
server runs the middle trunk, and training exchanges only hidden states and
their gradients over a binary wire protocol. On top of the partitioned model
it provides LoRA fine-tuning with optional Gaussian noise on the exchanged
hidden states, three multi-client scheduling strategies, collaborative
KV-cache generation, an inversion-attack evaluation harness, and a CLI for
running experiments end to end.
"""

__version__ = "0.1.0"
