"""Side-network fine-tuning workbench on a numpy autodiff engine.

Frozen ViT backbone, a compact side network (DTL / DTL+), PETL baselines for
comparison, a training-memory meter driven by the autodiff retention ledger,
a small trainer and a shared-prefix multi-task inference engine.
"""

__version__ = "0.1.0"
