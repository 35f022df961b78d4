"""remex: multimodal disease relation extraction.

A graph-attention encoder over a disease knowledge graph and a
bag-of-sentences text encoder score the same relation types and are
co-trained so each modality teaches the other. Everything runs on a small
reverse-mode autodiff core over numpy; no deep-learning framework involved.
"""

__version__ = "0.1.0"
