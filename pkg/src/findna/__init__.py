"""Self-distillation pretraining for one-hot DNA sequences, on a small numpy autodiff core."""

__version__ = "0.1.0"
