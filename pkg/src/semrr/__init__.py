"""Semantic-guided single-image reflection removal, at desk scale.

Synthetic quadruple generation (mixed image, background, reflection, label
map), a multi-task separation network with selectable semantic fusion
wirings, the full loss stack, and a deterministic training/evaluation
harness with ablation and blend-strength studies.
"""

__version__ = "0.1.0"

from .data import Quadruple, DatasetManifest, ManifestRecord  # noqa: F401
from .datagen import blend, derive_reflection  # noqa: F401
from .losses import LossWeights  # noqa: F401
from .metrics import SsimParams  # noqa: F401
from .model import ModelConfig, build_model  # noqa: F401
from .trainer import TrainConfig, train, evaluate  # noqa: F401
