"""Caption templates, the prompt vocabulary, and prompt expansion.

Prompts are built from a fixed template bank so the toy text encoder can use
a closed vocabulary. An external LLM endpoint can optionally rewrite the
expanded prompt; on any failure the template output is used as-is.
"""

from __future__ import annotations

import logging
import os
import re

import numpy as np

from .faceprior import LABELS, FauPriorTable, AU_VOCAB

log = logging.getLogger(__name__)

LABEL_WORDS = {
    "neutral": "neutral",
    "happiness": "happy",
    "sadness": "sad",
    "surprise": "surprised",
    "fear": "fearful",
    "disgust": "disgusted",
    "anger": "angry",
}

# Muscle-movement phrase per AU, used both in captions and prompt expansion.
AU_PHRASES = {
    1: "inner brows raised",
    2: "outer brows raised",
    4: "brows lowered and drawn together",
    5: "eyes wide open",
    6: "cheeks raised",
    7: "eyelids tightened",
    9: "nose wrinkled",
    12: "lip corners pulled up",
    15: "lip corners pulled down",
    20: "lips stretched wide",
    23: "lips pressed thin",
    26: "jaw dropped open",
}

SEED_DESCRIPTIONS = (
    "a portrait of a person",
    "a close up face of a person",
    "a photo of a face",
)

CONTEXTS = (
    "plain background",
    "soft lighting",
    "front view",
    "studio portrait",
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[a-z]+")


def _phrase_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def build_vocab() -> dict[str, int]:
    """Deterministic closed vocabulary over the whole template bank."""
    words: list[str] = []
    for bank in (SEED_DESCRIPTIONS, CONTEXTS):
        for phrase in bank:
            words.extend(_phrase_words(phrase))
    for phrase in AU_PHRASES.values():
        words.extend(_phrase_words(phrase))
    for word in LABEL_WORDS.values():
        words.extend(_phrase_words(word))
    words.extend(["a", "face", "with", "expression", "and"])
    vocab = {PAD_TOKEN: 0, UNK_TOKEN: 1}
    for w in sorted(set(words)):
        vocab[w] = len(vocab)
    return vocab


VOCAB = build_vocab()
VOCAB_SIZE = len(VOCAB)


def tokenize(text: str, length: int) -> np.ndarray:
    """Word-level ids, padded / truncated to a fixed length."""
    ids = [VOCAB.get(w, VOCAB[UNK_TOKEN]) for w in _phrase_words(text)]
    ids = ids[:length]
    ids += [VOCAB[PAD_TOKEN]] * (length - len(ids))
    return np.asarray(ids, dtype=np.int64)


class LlmClient:
    """Minimal plain-text HTTP client for optional prompt rewriting.

    The endpoint URL comes from the constructor or EXPRSYNTH_LLM_URL; when
    unset, rewrite() is a pass-through. Any transport error falls back to the
    input prompt.
    """

    def __init__(self, url: str | None = None, timeout: float = 5.0):
        self.url = url if url is not None else os.environ.get("EXPRSYNTH_LLM_URL")
        self.timeout = timeout

    @property
    def configured(self) -> bool:
        return bool(self.url)

    def rewrite(self, prompt: str) -> str:
        if not self.configured:
            return prompt
        try:
            import requests

            resp = requests.post(self.url, data=prompt.encode("utf-8"), timeout=self.timeout)
            resp.raise_for_status()
            text = resp.text.strip()
            return text if text else prompt
        except Exception as exc:  # noqa: BLE001 - fallback is the contract
            log.warning("LLM rewrite failed (%s); using template prompt", exc)
            return prompt


def expand_prompt(
    seed_description: str,
    label_id: int,
    rng: np.random.Generator,
    table: FauPriorTable | None = None,
    llm: LlmClient | None = None,
) -> str:
    """Expand a coarse description into a full caption for one expression.

    The label word comes first so it survives truncation at the tokenizer's
    fixed length; muscle phrases are keyed to the label's base AU prior.
    """
    table = table or FauPriorTable()
    name = LABELS[label_id]
    base_bits = table.base_bits(label_id)
    phrases = [AU_PHRASES[au] for au, bit in zip(AU_VOCAB, base_bits) if bit]
    context = CONTEXTS[int(rng.integers(len(CONTEXTS)))]
    parts = [f"a {LABEL_WORDS[name]} face"]
    if phrases:
        parts.append(" and ".join(phrases))
    parts.append(seed_description)
    parts.append(context)
    prompt = ", ".join(parts)
    if llm is not None and llm.configured:
        prompt = llm.rewrite(prompt)
    return prompt


def caption_for(label_id: int, au_bits: np.ndarray, rng: np.random.Generator,
                table: FauPriorTable | None = None) -> str:
    """Caption for a rendered corpus image; same template path as synthesis."""
    seed_desc = SEED_DESCRIPTIONS[int(rng.integers(len(SEED_DESCRIPTIONS)))]
    return expand_prompt(seed_desc, label_id, rng, table=table)
