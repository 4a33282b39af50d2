"""Entity-type schemes: map NER tags and link popularity to categorical indices.

Three variants are supported. ``NONE`` disables the entity channel
entirely (no indices are produced). ``NER`` maps each of the 15 named
tags to its ordinal and non-entities to a final "other" slot, 16
categories in total. ``NER_POPULARITY`` splits every named tag into a
popular/unpopular pair (popular first) and keeps the "other" slot last,
31 categories in total.

An entity counts as popular when its top link log-probability meets the
threshold (inclusive ``>=``, so the default boundary value -0.15 itself
is popular). The ordinal order of the tags is frozen in
``corpus.NER_TAG_ORDER``; checkpoints record it and refuse to load under
a different ordering.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

from .corpus import NER_TAG_ORDER, ClaimInstance
from .errors import ConfigError

DEFAULT_EL_THRESHOLD = -0.15

_ORDINAL = {tag: i for i, tag in enumerate(NER_TAG_ORDER)}


class SchemeVariant(enum.Enum):
    NONE = "none"
    NER = "ner"
    NER_POPULARITY = "ner_popularity"


@dataclass(frozen=True)
class EntityScheme:
    """Which entity-typing variant is active, plus the popularity threshold."""

    variant: SchemeVariant
    el_threshold: float = DEFAULT_EL_THRESHOLD

    def __post_init__(self) -> None:
        if self.el_threshold > 0:
            raise ConfigError(f"el_threshold must be <= 0, got {self.el_threshold}")

    @property
    def cardinality(self) -> int:
        return scheme_cardinality(self)


def scheme_cardinality(scheme: EntityScheme | SchemeVariant) -> int:
    """Number of entity-type categories: NONE -> 0, NER -> 16, NER_POPULARITY -> 31."""
    variant = scheme.variant if isinstance(scheme, EntityScheme) else scheme
    if variant is SchemeVariant.NONE:
        return 0
    if variant is SchemeVariant.NER:
        return len(NER_TAG_ORDER) + 1
    return 2 * len(NER_TAG_ORDER) + 1


def is_popular(tag: str, el_logprob: Optional[float], threshold: float) -> bool:
    """True iff the token is a named entity linked at or above the threshold."""
    if threshold > 0:
        raise ConfigError(f"threshold must be <= 0, got {threshold}")
    return tag != "O" and el_logprob is not None and el_logprob >= threshold


def type_index(scheme: EntityScheme, tag: str, popular: bool) -> int:
    """Categorical index of one token under a non-trivial scheme.

    NER: ordinal of the tag, O -> 15. NER_POPULARITY: 2*ordinal for a
    popular entity, 2*ordinal + 1 for an unpopular one, O -> 30. The
    ``popular`` flag is ignored under NER.
    """
    if scheme.variant is SchemeVariant.NONE:
        raise ConfigError("type_index is undefined for the NONE scheme")
    if scheme.variant is SchemeVariant.NER:
        if tag == "O":
            return len(NER_TAG_ORDER)
        return _ORDINAL[tag]
    if tag == "O":
        return 2 * len(NER_TAG_ORDER)
    return 2 * _ORDINAL[tag] + (0 if popular else 1)


def assign_indices(scheme: EntityScheme, inst: ClaimInstance) -> list[int]:
    """Per-token entity-type indices for a validated instance."""
    if scheme.variant is SchemeVariant.NONE:
        raise ConfigError("assign_indices is undefined for the NONE scheme")
    return [
        type_index(
            scheme,
            tag,
            is_popular(tag, lp, scheme.el_threshold),
        )
        for tag, lp in zip(inst.ner_tags, inst.el_logprobs)
    ]


def type_names(scheme: EntityScheme | SchemeVariant) -> list[str]:
    """Human-readable category names in index order.

    NER: the 15 tag names then OTHER. NER_POPULARITY: TAG_popular,
    TAG_unpopular pairs then OTHER.
    """
    variant = scheme.variant if isinstance(scheme, EntityScheme) else scheme
    if variant is SchemeVariant.NONE:
        raise ConfigError("the NONE scheme has no entity-type categories")
    if variant is SchemeVariant.NER:
        return list(NER_TAG_ORDER) + ["OTHER"]
    names: list[str] = []
    for tag in NER_TAG_ORDER:
        names.append(f"{tag}_popular")
        names.append(f"{tag}_unpopular")
    names.append("OTHER")
    return names


def tag_ordering_string() -> str:
    """The frozen tag ordering, recorded in checkpoints for compatibility checks."""
    return ",".join(NER_TAG_ORDER)


def popular_token_count(inst: ClaimInstance, threshold: float = DEFAULT_EL_THRESHOLD) -> int:
    """Number of tokens whose entity link clears the popularity threshold."""
    return sum(
        is_popular(tag, lp, threshold)
        for tag, lp in zip(inst.ner_tags, inst.el_logprobs)
    )
