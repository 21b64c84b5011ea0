"""Refine person bounding boxes by descending a frozen re-ID network's loss.

Modules: ``numgrid`` (arrays, seeds, PPM), ``roi`` (differentiable box crop),
``embednet`` (small conv embedding net), ``proxy`` (proxy table and triplet
loss), ``refine`` (box optimizer), ``scenes`` (synthetic scenes),
``evaluation`` (CMC/mAP), ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
