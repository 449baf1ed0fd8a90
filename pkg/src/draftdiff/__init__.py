"""draftdiff: hierarchy-aware multi-stage diffusion for generative garment design.

Coarse drafts are synthesized from high-level concepts; low-level attributes
are then edited one at a time via masked, gradient-guided sampling. Everything
runs at desk scale on CPU: a hand-rolled autodiff tensor core, a tiny
conditional UNet, a procedural glyph dataset with ground-truth masks, and a
metric suite for evaluating drafts and edits.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
