"""Weakly-supervised vision-language pre-training from category labels.

Builds image-text corpora by prompting a language model with category labels,
pre-trains a dual-encoder-plus-fusion model with ITC/ITM/MLM/IMC objectives
over category-level positives, and evaluates cross-modal retrieval.
"""

__version__ = "0.1.0"
