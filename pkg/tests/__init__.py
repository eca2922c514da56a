"""
Tests for the slade-metric pipeline.
"""
