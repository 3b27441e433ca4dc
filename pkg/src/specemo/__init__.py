"""Spectrogram-image speech emotion recognition with VGG features and attention gates."""

__version__ = "0.1.0"
