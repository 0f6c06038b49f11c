"""Segmentation accuracy metrics: overlap, contour distances and report generation."""
