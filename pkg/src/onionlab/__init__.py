"""GRU repeat-task laboratory: training, interventions, probes and gate analysis."""

__version__ = "0.1.0"
