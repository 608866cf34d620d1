"""querydistill: a desk-scale lab for online-distillation training of a tiny
query-based detector on synthetic scenes."""

__version__ = "0.1.0"
