"""Order-grounded deocclusion toolkit: synthetic amodal ground truth,
iterative completion over pluggable backends, toy diffusion training,
evaluation, and a human-in-the-loop review service."""

__version__ = "0.1.0"
