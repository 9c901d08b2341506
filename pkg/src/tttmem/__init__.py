"""Streaming test-time-training memory stack."""
