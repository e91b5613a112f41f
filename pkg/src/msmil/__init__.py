"""Multi-scale multiple-instance-learning pipeline for WSI classification.

Submodules: :mod:`~msmil.slide` (patch sampling), :mod:`~msmil.features`
(backends and cache), :mod:`~msmil.codebook` (k-means),
:mod:`~msmil.aggregate` (baseline/MC/MA/MM bag-of-words),
:mod:`~msmil.classify` (SVMs), :mod:`~msmil.harness` (experiments and
synthetic data), :mod:`~msmil.report` (CSV/SVG reports) and
:mod:`~msmil.cli`.
"""

__version__ = "0.1.0"

from ._kernels import backend_name

__all__ = ["__version__", "backend_name"]
