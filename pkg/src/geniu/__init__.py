"""GENIU: generative unlearning for class-imbalanced classifiers.

Training phase: a classifier, one trainable noise prompt per class, and a
VAE proxy generator are trained concurrently. Unlearning phase: only the
stored noise prompts and generator are used to produce one proxy per class,
and the classifier is tuned on that single batch without touching any data.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
