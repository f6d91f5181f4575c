"""Concept-attribution prototypes for validating feedforward network predictions.

The package splits into a numerical core (engine, attribution, prototypes,
metrics, ood, synth), a file-level pipeline layer, and a FastAPI service that
the ``pcx`` command-line client talks to.
"""

__version__ = "0.1.0"
