"""Keyphrase generation with a copy-augmented LSTM encoder-decoder trained
with likelihood and unlikelihood objectives."""

__version__ = "0.1.0"
