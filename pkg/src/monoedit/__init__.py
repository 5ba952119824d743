"""Minimal-change synthetic data tooling.

Edits exactly one attribute (background, color, or texture) of a real
image at a time, pairs feasible/infeasible edit prompts per class, filters
the generated images with a VQA backend, and measures the effect on a
low-rank-adapter fine-tuned dual-encoder classifier.  Every heavy model
sits behind a pluggable backend; deterministic mocks ship with the repo so
the whole pipeline runs at desk scale.
"""

__version__ = "0.1.0"
