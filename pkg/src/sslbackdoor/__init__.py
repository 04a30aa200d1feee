"""Backdoor attacks on self-supervised learning, at desk scale.

Submodules: :mod:`.trigger` (patch triggers), :mod:`.manifest` and
:mod:`.poison` (datasets and poisoning), :mod:`.ssl` (encoders and training),
:mod:`.probe` (linear evaluation), :mod:`.distill` (distillation defence) and
:mod:`.harness` (experiments and command line).
"""
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    PlacementError,
    ProvenanceError,
    ProvenanceWarning,
    RateError,
    SSLBackdoorError,
    TrainingDivergence,
)
from .manifest import DatasetManifest, ManifestEntry, UnlabeledView, build_manifest
from .poison import (
    PoisonRecipe,
    apply_recipe,
    build_patched_valset,
    materialize,
    poison_superclass,
    poison_targeted,
    poison_untargeted,
)
from .trigger import (
    PlacementRecord,
    TriggerImage,
    TriggerSpec,
    generate_trigger,
    paste_trigger,
    sample_location,
)

__version__ = "0.1.0"
