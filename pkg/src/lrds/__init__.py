"""Knowledge distillation with label revision and influence-based data selection."""

__version__ = "0.1.0"
