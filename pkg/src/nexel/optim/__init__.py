"""Losses, the Adam optimizer and the training loop."""
