"""
Reverse-mode autodiff over dense N-C-H-W numpy arrays
"""
