"""Remaining-useful-life regression with a small decoder-only transformer.

Modules: ``ingest`` (CMAPSS text files), ``preprocess`` (labels, per-regime
min-max, smoothing, windows), ``numerics`` (tape autodiff and Adam),
``model``, ``train`` (stopping rules), ``transfer`` (freeze and fine-tune),
``evaluation`` (RMSE and score), ``synth``, ``checkpoint`` and ``cli``.
"""

__version__ = "0.1.0"
