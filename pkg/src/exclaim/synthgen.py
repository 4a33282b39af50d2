"""Synthetic corpora whose labels follow a known rule over entity signals.

Token identity never carries label information: tokens are drawn from a
seeded per-language vocabulary independently of the label, so models
without the relevant entity channel score at chance. The label rule is
expressed purely through NER tags (ENTITY_PRESENCE) or through tags plus
link log-probabilities (POPULARITY); RANDOM labels are independent of
everything. Pseudo-translations re-cast tokens into a disjoint target
vocabulary while preserving labels, tags and log-probabilities
position-wise, which exercises the transfer-rate machinery without any
real translation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import ClaimInstance, Dataset, NER_TAG_ORDER, PairingTable
from .embeddings import hash_embed
from .errors import ConfigError
from .entity_typing import DEFAULT_EL_THRESHOLD

RULE_ENTITY_PRESENCE = "entity_presence"
RULE_POPULARITY = "popularity"
RULE_RANDOM = "random"

#: Fallback pool for distractor entities injected into every class alike.
_DISTRACTOR_POOL = ("PER", "LOC", "ORG", "TIME", "EVE")


@dataclass(frozen=True)
class LabelRule:
    kind: str
    tag: Optional[str] = None
    threshold: float = DEFAULT_EL_THRESHOLD

    def __post_init__(self) -> None:
        if self.kind not in (RULE_ENTITY_PRESENCE, RULE_POPULARITY, RULE_RANDOM):
            raise ConfigError(f"unknown label rule {self.kind!r}")
        if self.kind in (RULE_ENTITY_PRESENCE, RULE_POPULARITY):
            if self.tag not in NER_TAG_ORDER:
                raise ConfigError(
                    f"rule {self.kind} needs a named entity tag, got {self.tag!r}"
                )
        if self.threshold > 0:
            raise ConfigError(f"rule threshold must be <= 0, got {self.threshold}")


@dataclass(frozen=True)
class GenSpec:
    rule: LabelRule
    n_instances: int
    languages: tuple[str, ...] = ("aa",)
    length_range: tuple[int, int] = (6, 14)
    vocab_size: int = 200
    positive_rate: float = 0.5
    seed: int = 0
    embed_dim: int = 32

    def __post_init__(self) -> None:
        if self.n_instances < 1:
            raise ConfigError(f"n_instances must be >= 1, got {self.n_instances}")
        if not self.languages:
            raise ConfigError("at least one language code is required")
        lo, hi = self.length_range
        if not (1 <= lo <= hi <= 128):
            raise ConfigError(f"length_range must satisfy 1 <= lo <= hi <= 128, got {self.length_range}")
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError(f"positive_rate must be in (0,1), got {self.positive_rate}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")


def apply_rule(rule: LabelRule, inst: ClaimInstance) -> int:
    """Recompute the label a rule assigns to an instance."""
    if rule.kind == RULE_ENTITY_PRESENCE:
        return int(any(tag == rule.tag for tag in inst.ner_tags))
    if rule.kind == RULE_POPULARITY:
        return int(any(
            tag == rule.tag and lp is not None and lp >= rule.threshold
            for tag, lp in zip(inst.ner_tags, inst.el_logprobs)
        ))
    raise ConfigError("RANDOM labels are not a function of the instance")


def _above_band(rng: np.random.Generator, threshold: float) -> float:
    return float(rng.uniform(threshold, 0.0)) if threshold < 0 else 0.0


def _below_band(rng: np.random.Generator, threshold: float) -> float:
    return float(rng.uniform(threshold - 1.0, threshold - 0.05))


def _any_band(rng: np.random.Generator, threshold: float) -> float:
    return _above_band(rng, threshold) if rng.random() < 0.5 else _below_band(rng, threshold)


def generate(spec: GenSpec) -> tuple[Dataset, list[tuple[str, np.ndarray]]]:
    """Build a corpus plus hash-embedding store entries, fully seeded.

    Labels follow the rule exactly: under ENTITY_PRESENCE an instance is
    positive iff it contains the target tag; under POPULARITY every
    instance contains target-tag tokens and positives get exactly the
    above-threshold link probabilities the rule demands. Distractor
    entities of other types appear in both classes alike.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    vocab = {
        lang: [f"{lang}:w{i:04d}" for i in range(spec.vocab_size)]
        for lang in spec.languages
    }
    rule = spec.rule
    lo, hi = spec.length_range
    instances: list[ClaimInstance] = []
    for idx in range(spec.n_instances):
        lang = spec.languages[idx % len(spec.languages)]
        label = int(rng.random() < spec.positive_rate)
        n = int(rng.integers(lo, hi + 1))
        tokens = [vocab[lang][j] for j in rng.integers(0, spec.vocab_size, size=n)]
        tags = ["O"] * n
        logprobs: list[Optional[float]] = [None] * n
        positions = list(rng.permutation(n))

        if rule.kind == RULE_ENTITY_PRESENCE:
            target_count = int(rng.integers(1, 4)) if label == 1 else 0
            target_count = min(target_count, n)
            for _ in range(target_count):
                pos = positions.pop()
                tags[pos] = rule.tag
                logprobs[pos] = _any_band(rng, rule.threshold)
            _add_distractors(rng, rule.tag, tags, logprobs, positions, rule.threshold)
        elif rule.kind == RULE_POPULARITY:
            target_count = min(int(rng.integers(1, 4)), n, len(positions))
            target_positions = [positions.pop() for _ in range(target_count)]
            for rank, pos in enumerate(target_positions):
                tags[pos] = rule.tag
                if label == 1 and rank == 0:
                    logprobs[pos] = _above_band(rng, rule.threshold)
                elif label == 1:
                    logprobs[pos] = _any_band(rng, rule.threshold)
                else:
                    logprobs[pos] = _below_band(rng, rule.threshold)
            _add_distractors(rng, rule.tag, tags, logprobs, positions, rule.threshold)
        else:  # RANDOM: entity layout independent of the label
            _add_distractors(rng, None, tags, logprobs, positions, rule.threshold)

        inst = ClaimInstance(
            id=f"s{idx:05d}",
            lang=lang,
            tokens=tuple(tokens),
            label=label,
            ner_tags=tuple(tags),
            el_logprobs=tuple(logprobs),
        )
        if rule.kind != RULE_RANDOM and apply_rule(rule, inst) != label:
            raise AssertionError(f"generator produced a rule-violating instance {inst.id}")
        instances.append(inst)

    dataset = Dataset(name="synthetic", instances=instances)
    entries = hash_entries(dataset, spec.embed_dim, spec.seed)
    return dataset, entries


def _add_distractors(
    rng: np.random.Generator,
    excluded_tag: Optional[str],
    tags: list[str],
    logprobs: list[Optional[float]],
    positions: list[int],
    threshold: float,
) -> None:
    pool = [t for t in _DISTRACTOR_POOL if t != excluded_tag]
    count = min(int(rng.integers(0, 3)), len(positions))
    for _ in range(count):
        pos = positions.pop()
        tags[pos] = pool[int(rng.integers(0, len(pool)))]
        logprobs[pos] = _any_band(rng, threshold)


def hash_entries(
    dataset: Dataset, d_w: int, seed: int
) -> list[tuple[str, np.ndarray]]:
    """Hash-embedding store entries for every instance of a dataset."""
    return [(inst.id, hash_embed(inst.tokens, d_w, seed)) for inst in dataset.instances]


def generate_pairing(
    base: Dataset, n_langs: int, seed: int
) -> tuple[Dataset, PairingTable]:
    """Clone a corpus into ``n_langs`` pseudo-languages with a pairing table.

    Each clone keeps the label and the entity structure position-wise;
    tokens are re-mapped through a seeded per-language substitution table
    into a disjoint vocabulary, standing in for translation.
    """
    if len(base) == 0:
        raise ConfigError("generate_pairing requires a non-empty base dataset")
    if n_langs < 1:
        raise ConfigError(f"n_langs must be >= 1, got {n_langs}")
    rng = np.random.Generator(np.random.PCG64(seed))
    base_vocab = sorted({tok for inst in base.instances for tok in inst.tokens})
    clones: list[ClaimInstance] = []
    pairs: list[tuple[str, str, str]] = []
    for i in range(n_langs):
        lang = f"x{i:02d}"
        perm = rng.permutation(len(base_vocab))
        mapping = {
            tok: f"{lang}:w{perm[j]:05d}" for j, tok in enumerate(base_vocab)
        }
        for inst in base.instances:
            clone_id = f"{inst.id}.{lang}"
            clones.append(ClaimInstance(
                id=clone_id,
                lang=lang,
                tokens=tuple(mapping[tok] for tok in inst.tokens),
                label=inst.label,
                ner_tags=inst.ner_tags,
                el_logprobs=inst.el_logprobs,
                source_id=inst.id,
            ))
            pairs.append((inst.id, clone_id, lang))
    return (
        Dataset(name=f"{base.name}_translated", instances=clones),
        PairingTable(pairs=tuple(pairs)),
    )
