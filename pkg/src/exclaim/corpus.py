"""Claim-instance data model and JSONL corpus I/O.

A dataset is a UTF-8 JSONL file, one object per line, with keys exactly
``{id, lang, tokens, label, ner, el_logprob}`` plus an optional
``source_id`` naming the instance a translation was derived from.
``ner`` holds one tag per token (one of the 15 named types or ``O``);
``el_logprob`` holds the top entity-link log-probability per token
(a number <= 0) or ``null`` where no link applies. ``O`` tokens never
carry a log-probability.

Instances are pre-tokenized upstream; this module never splits raw text.
Sequences longer than the cap are silently head-truncated (first
``max_len`` tokens kept) and the per-dataset truncation count is logged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import DataError

logger = logging.getLogger(__name__)

MAX_SEQUENCE_LENGTH = 128

#: Tag vocabulary accepted in the ``ner`` field: 15 named types plus O.
NER_TAG_ORDER = (
    "PER", "ORG", "LOC", "ANIM", "BIO", "CEL", "DIS", "EVE",
    "FOOD", "INST", "MEDIA", "PLANT", "MYTH", "TIME", "VEHI",
)
VALID_NER_TAGS = frozenset(NER_TAG_ORDER) | {"O"}

_REQUIRED_KEYS = ("id", "lang", "tokens", "label", "ner", "el_logprob")
_ALLOWED_KEYS = frozenset(_REQUIRED_KEYS) | {"source_id"}


@dataclass(frozen=True)
class ClaimInstance:
    """One social-media statement with per-token entity annotations."""

    id: str
    lang: str
    tokens: tuple[str, ...]
    label: int
    ner_tags: tuple[str, ...]
    el_logprobs: tuple[Optional[float], ...]
    source_id: Optional[str] = None

    def __post_init__(self) -> None:
        n = len(self.tokens)
        if n < 1:
            raise DataError(f"instance {self.id!r}: empty token sequence")
        if len(self.ner_tags) != n or len(self.el_logprobs) != n:
            raise DataError(
                f"instance {self.id!r}: length mismatch "
                f"(tokens={n}, ner={len(self.ner_tags)}, el_logprob={len(self.el_logprobs)})"
            )
        if self.label not in (0, 1):
            raise DataError(f"instance {self.id!r}: label {self.label!r} outside {{0,1}}")
        for i, tag in enumerate(self.ner_tags):
            if tag not in VALID_NER_TAGS:
                raise DataError(f"instance {self.id!r}: unknown NER tag {tag!r} at token {i}")
            lp = self.el_logprobs[i]
            if lp is not None:
                if lp > 0:
                    raise DataError(
                        f"instance {self.id!r}: el_logprob {lp} > 0 at token {i} "
                        "(must be a log-probability)"
                    )
                if tag == "O":
                    raise DataError(
                        f"instance {self.id!r}: token {i} tagged O carries an el_logprob"
                    )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Dataset:
    """An ordered collection of instances with unique ids."""

    name: str
    instances: list[ClaimInstance] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for inst in self.instances:
            if inst.id in seen:
                raise DataError(f"duplicate instance id {inst.id!r} in dataset {self.name!r}")
            seen.add(inst.id)

    @property
    def languages(self) -> set[str]:
        return {inst.lang for inst in self.instances}

    def by_id(self) -> dict[str, ClaimInstance]:
        return {inst.id: inst for inst in self.instances}

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


@dataclass(frozen=True)
class PairingTable:
    """Original/translated instance pairs for transfer analysis."""

    pairs: tuple[tuple[str, str, str], ...]  # (original_id, translated_id, lang)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for _orig, trans, _lang in self.pairs:
            if trans in seen:
                raise DataError(f"translated id {trans!r} appears in more than one pair")
            seen.add(trans)

    def __len__(self) -> int:
        return len(self.pairs)


def parse_instance(line: str, line_number: Optional[int] = None) -> ClaimInstance:
    """Parse and validate one JSONL line into a ClaimInstance.

    ``null`` entries in ``el_logprob`` become absent values. All schema
    violations raise DataError naming the offending id (or line number
    when the id itself is unusable).
    """
    where = f"line {line_number}" if line_number is not None else "line"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{where}: malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object, got {type(obj).__name__}")

    for key in _REQUIRED_KEYS:
        if key not in obj:
            ident = obj.get("id", "?")
            raise DataError(f"{where} (id {ident!r}): missing key {key!r}")
    unknown = set(obj) - _ALLOWED_KEYS
    if unknown:
        raise DataError(f"{where} (id {obj.get('id', '?')!r}): unknown keys {sorted(unknown)}")

    ident = obj["id"]
    if not isinstance(ident, str) or not ident:
        raise DataError(f"{where}: id must be a non-empty string")
    lang = obj["lang"]
    if not isinstance(lang, str) or not lang:
        raise DataError(f"instance {ident!r}: lang must be a non-empty string")
    tokens = obj["tokens"]
    ner = obj["ner"]
    el = obj["el_logprob"]
    for name, value in (("tokens", tokens), ("ner", ner), ("el_logprob", el)):
        if not isinstance(value, list):
            raise DataError(f"instance {ident!r}: {name} must be an array")
    if not all(isinstance(t, str) for t in tokens):
        raise DataError(f"instance {ident!r}: tokens must all be strings")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label not in (0, 1):
        raise DataError(f"instance {ident!r}: label {label!r} outside {{0,1}}")
    logprobs: list[Optional[float]] = []
    for i, value in enumerate(el):
        if value is None:
            logprobs.append(None)
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            logprobs.append(float(value))
        else:
            raise DataError(f"instance {ident!r}: el_logprob[{i}] must be a number or null")
    source_id = obj.get("source_id")
    if source_id is not None and (not isinstance(source_id, str) or not source_id):
        raise DataError(f"instance {ident!r}: source_id must be a non-empty string")

    return ClaimInstance(
        id=ident,
        lang=lang,
        tokens=tuple(tokens),
        label=label,
        ner_tags=tuple(ner),
        el_logprobs=tuple(logprobs),
        source_id=source_id,
    )


def instance_to_json(inst: ClaimInstance) -> str:
    """Serialize an instance to one compact JSON line (no trailing newline)."""
    obj = {
        "id": inst.id,
        "lang": inst.lang,
        "tokens": list(inst.tokens),
        "label": inst.label,
        "ner": list(inst.ner_tags),
        "el_logprob": list(inst.el_logprobs),
    }
    if inst.source_id is not None:
        obj["source_id"] = inst.source_id
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def truncate_instance(inst: ClaimInstance, max_len: int = MAX_SEQUENCE_LENGTH) -> ClaimInstance:
    """Cut tokens, tags and log-probabilities to the first ``max_len`` entries.

    Idempotent; instances already within the cap are returned unchanged.
    """
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    if len(inst.tokens) <= max_len:
        return inst
    return replace(
        inst,
        tokens=inst.tokens[:max_len],
        ner_tags=inst.ner_tags[:max_len],
        el_logprobs=inst.el_logprobs[:max_len],
    )


def load_dataset(
    path: str | Path,
    max_len: int = MAX_SEQUENCE_LENGTH,
    name: Optional[str] = None,
) -> Dataset:
    """Load a JSONL corpus, truncating over-long instances.

    Preserves file order. Any parse error aborts with its line number;
    duplicate ids are rejected. An empty file yields an empty dataset
    (legal for prediction; training rejects it separately).
    """
    path = Path(path)
    instances: list[ClaimInstance] = []
    truncated = 0
    try:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                inst = parse_instance(line, line_number=lineno)
                cut = truncate_instance(inst, max_len)
                if cut is not inst:
                    truncated += 1
                instances.append(cut)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    if truncated:
        logger.info("dataset %s: truncated %d instance(s) to %d tokens", path, truncated, max_len)
    return Dataset(name=name or path.stem, instances=instances)


def save_dataset(dataset: Dataset | Iterable[ClaimInstance], path: str | Path) -> None:
    """Write instances as JSONL in iteration order."""
    instances = dataset.instances if isinstance(dataset, Dataset) else list(dataset)
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(instance_to_json(inst))
            fh.write("\n")


def build_pairing(original: Dataset, translated: Dataset) -> PairingTable:
    """Pair each translated instance with its source via ``source_id``.

    Every translated instance must carry a source_id resolvable in
    ``original``; violations are collected and raised together.
    """
    known = {inst.id for inst in original.instances}
    missing: list[str] = []
    dangling: list[str] = []
    pairs: list[tuple[str, str, str]] = []
    for inst in translated.instances:
        if inst.source_id is None:
            missing.append(inst.id)
        elif inst.source_id not in known:
            dangling.append(f"{inst.id}->{inst.source_id}")
        else:
            pairs.append((inst.source_id, inst.id, inst.lang))
    if missing:
        raise DataError(f"translated instances missing source_id: {_preview(missing)}")
    if dangling:
        raise DataError(f"dangling source references: {_preview(dangling)}")
    return PairingTable(pairs=tuple(pairs))


def load_pairing(path: str | Path) -> PairingTable:
    """Read a pairing JSONL file of ``{original_id, translated_id, lang}``."""
    path = Path(path)
    pairs: list[tuple[str, str, str]] = []
    try:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path} line {lineno}: malformed JSON: {exc}") from None
                try:
                    pairs.append((obj["original_id"], obj["translated_id"], obj["lang"]))
                except (KeyError, TypeError):
                    raise DataError(
                        f"{path} line {lineno}: expected keys original_id, translated_id, lang"
                    ) from None
    except OSError as exc:
        raise DataError(f"cannot read pairing file {path}: {exc}") from None
    return PairingTable(pairs=tuple(pairs))


def save_pairing(table: PairingTable, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for orig, trans, lang in table.pairs:
            fh.write(json.dumps(
                {"original_id": orig, "translated_id": trans, "lang": lang},
                ensure_ascii=False, separators=(",", ":"),
            ))
            fh.write("\n")


def _preview(items: Sequence[str], limit: int = 5) -> str:
    shown = ", ".join(repr(x) for x in items[:limit])
    if len(items) > limit:
        shown += f", ... ({len(items)} total)"
    return shown
