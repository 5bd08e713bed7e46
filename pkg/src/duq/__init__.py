"""Sequence-to-sequence weather forecasting with Gaussian prediction intervals.

Modules:
    diffcore: tensors with reverse-mode differentiation.
    data: records, missing-value repair, normalization, model tensors.
    model: GRU encoder-decoder with a mean / variance head.
    loss: Gaussian negative log-likelihood, MSE, MAE.
    train: mini-batch training with early stopping.
    infer: prediction intervals and ensembles.
    metrics: RMSE, skill score, PICP, paired t-test.
    synth: synthetic data with a known noise law.
    cli: the ``duq`` command.
"""

__version__ = "0.1.0"
