"""EEG to speech-feature regression with attention seq2seq models."""

__version__ = "0.1.0"
