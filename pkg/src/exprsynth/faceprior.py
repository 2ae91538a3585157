"""Expression labels, the AU vocabulary, and the AU-to-expression prior.

The prior table is EMFACS-style domain knowledge: each basic expression is
associated with a base set of action units over a fixed 12-AU vocabulary.
The table drives both AU assignment during synthesis and the toy renderer's
ground truth, so every accuracy metric closes the loop against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Class ids are fixed; argmax ties anywhere in the codebase break toward the
# lowest id.
LABELS = ("neutral", "happiness", "sadness", "surprise", "fear", "disgust", "anger")
NUM_CLASSES = len(LABELS)
LABEL_TO_ID = {name: i for i, name in enumerate(LABELS)}

# 12-AU vocabulary, in FACS numbering order.
AU_VOCAB = (1, 2, 4, 5, 6, 7, 9, 12, 15, 20, 23, 26)
NUM_AUS = len(AU_VOCAB)
AU_INDEX = {au: i for i, au in enumerate(AU_VOCAB)}

# Base AU sets per expression (EMFACS-style). Disgust optionally adds AU7
# (lid tightener) via FauPriorTable(disgust_lid_tightener=True).
_BASE_SETS = {
    "neutral": (),
    "happiness": (6, 12),
    "sadness": (1, 4, 15),
    "surprise": (1, 2, 5, 26),
    "fear": (1, 2, 4, 5, 7, 20, 26),
    "disgust": (9, 15),
    "anger": (4, 5, 7, 23),
}


def au_bits_from_set(aus) -> np.ndarray:
    """Binary vector over AU_VOCAB from an iterable of AU numbers."""
    bits = np.zeros(NUM_AUS, dtype=np.int64)
    for au in aus:
        bits[AU_INDEX[au]] = 1
    return bits


@dataclass(frozen=True)
class FauPriorTable:
    """Maps each expression label to its base AU set plus an inclusion-noise
    probability for non-base AUs (sampled per record during synthesis)."""

    noise_prob: float = 0.15
    disgust_lid_tightener: bool = False
    base_sets: dict = field(default_factory=lambda: dict(_BASE_SETS))

    def __post_init__(self):
        if not (0.0 <= self.noise_prob < 1.0):
            raise ValueError(f"noise_prob must be in [0, 1), got {self.noise_prob}")
        for name in LABELS:
            if name not in self.base_sets:
                raise ValueError(f"prior table missing label {name!r}")
        for name, aus in self.base_sets.items():
            unknown = [au for au in aus if au not in AU_INDEX]
            if unknown:
                raise ValueError(f"label {name!r} uses AUs outside the vocabulary: {unknown}")
            if name != "neutral" and len(aus) == 0:
                raise ValueError(f"non-neutral label {name!r} must have a nonempty base set")

    def base_bits(self, label_id: int) -> np.ndarray:
        name = LABELS[label_id]
        aus = set(self.base_sets[name])
        if name == "disgust" and self.disgust_lid_tightener:
            aus.add(7)
        return au_bits_from_set(aus)

    def sample_bits(self, label_id: int, rng: np.random.Generator) -> np.ndarray:
        """Base bits always on; each non-base bit flips on with noise_prob."""
        bits = self.base_bits(label_id)
        noise = (rng.random(NUM_AUS) < self.noise_prob).astype(np.int64)
        return np.maximum(bits, noise)
