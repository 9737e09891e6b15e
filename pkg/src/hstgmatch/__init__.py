"""Trajectory map-matching at desk scale: grid/graph representation,
masked-span self-supervised pretraining, spatial-temporal seq2seq
fine-tuning, greedy route decoding, and segment-length metrics."""

__version__ = "0.1.0"
