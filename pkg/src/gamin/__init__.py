"""GAMIN: black-box model inversion toolkit.

Trains small image classifiers, exposes them as query-budgeted black-box
oracles, runs the adversarial surrogate/generator inversion attack against
them, and post-processes generator outputs into class-representative
reconstructions.
"""

__version__ = "0.1.0"
