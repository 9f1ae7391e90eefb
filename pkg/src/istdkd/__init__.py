"""Point-supervised infrared small-target detection with bilevel VFM distillation."""

__version__ = "0.1.0"

TAGS = ("Salient", "Filamentary", "Faint", "Camouflaged")
