"""Two-stage visual semantic embedding with dense-to-sparse distillation, at toy scale."""

__version__ = "0.1.0"
