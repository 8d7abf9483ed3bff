"""Convolutional-transformer future-frame prediction with dual WGAN-GP critics for video anomaly detection."""
