"""Set-consistency self-distillation for single-cell morphology profiling."""

__version__ = "0.1.0"
