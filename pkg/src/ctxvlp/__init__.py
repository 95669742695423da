"""Context-aware video-text pretraining objectives on a numpy autodiff engine.

Modules: ``autodiff`` (tape-based reverse mode), ``nn`` (transformer blocks),
``objectives`` (the five training losses), ``data`` (synthetic procedural
corpus and sampler), ``training`` (AdamW loop and checkpoints), ``evaluation``
(zero-shot protocol and metrics) and ``cli``.
"""

__version__ = "0.1.0"
