"""Non-aligned driving-video dehazing at desk scale.

Subsystems: a framework-free tensor/autodiff core, physically-modeled haze
synthesis with known misalignment, sliding-window reference matching,
flow-guided cosine attention alignment and fusion, the full loss stack, and
a CLI pipeline tying them together.
"""

__version__ = "0.1.0"
