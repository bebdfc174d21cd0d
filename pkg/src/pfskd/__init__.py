"""Knowledge distillation for semantic segmentation with pixel-wise feature similarity maps.

Modules: ``tensor`` (ndarray helpers, PFST files), ``autodiff`` (tape), ``nn`` (conv, resize),
``pfs``, ``losses``, ``models``, ``data``, ``trainer``, ``metrics``, ``export``, ``cli``.
"""
__version__ = "0.1.0"
