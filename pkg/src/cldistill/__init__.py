"""Class-incremental learning with dense logit distillation."""

__version__ = "0.1.0"
