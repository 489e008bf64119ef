"""Prompt-controllable video segmentation and captioning, desk scale.

A user draws a box around one object in the first frame; the model emits a
caption plus per-entity masks, with a referring matrix tying each mask to
the caption positions that describe it. Everything runs on a small float64
autodiff core so gradients stay finite-difference checkable end to end.
"""

__version__ = "0.1.0"
