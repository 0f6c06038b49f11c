"""Skip-architecture FCN: spec files, weights and inference."""
