"""
Backend package: data pipeline, training loop and synthetic phantoms
"""
