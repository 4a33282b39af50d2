"""Adam optimization, the training loop, and checkpoint persistence.

Training is fully deterministic: parameters come from a seeded
initializer, epoch order comes from a jumped stream of the same PCG64
seed, per-batch gradients are averaged in a fixed order, and the best
checkpoint is the earliest epoch attaining the minimum validation loss.

Checkpoint file layout: one JSON manifest line, a ``---TENSORS---``
marker line, then the raw 64-bit little-endian tensors in the fixed
order EE, P_w, P_e, W_o, b_o (absent tensors skipped per config). The
manifest records the format version, both configs, the entity-tag
ordering, the selected epoch and its validation loss; loading refuses
checkpoints written under a different tag ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .corpus import Dataset, truncate_instance
from .embeddings import EmbeddingStore
from .entity_typing import EntityScheme, SchemeVariant, tag_ordering_string
from .errors import ConfigError, DataError, NumericalError
from .model import (
    Gradients,
    ModelConfig,
    ModelParams,
    cross_entropy,
    forward,
    init_params,
    instance_inputs,
    loss_and_gradients,
    param_shapes,
)

CHECKPOINT_VERSION = 1
_MARKER = b"---TENSORS---\n"


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    learning_rate: float = 3e-5
    epochs: int = 30
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_len: int = 128

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 <= beta < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {beta}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the present tensors."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in params.tensors().items()},
            v={name: np.zeros_like(p) for name, p in params.tensors().items()},
            t=0,
        )


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
        }


@dataclass
class Checkpoint:
    manifest: dict
    params: ModelParams

    @property
    def model_config(self) -> ModelConfig:
        return model_config_from_dict(self.manifest["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(model=self.model_config, **self.manifest["train"])


def adam_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    cfg: TrainConfig,
    context: str = "",
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update over every present tensor.

    Functional: returns fresh parameter and state objects. Non-finite
    gradients abort with the offending tensor named (plus any caller
    context such as epoch/batch).
    """
    grad_map = grads.tensors()
    param_map = params.tensors()
    if set(grad_map) != set(param_map):
        raise ConfigError(
            f"gradient tensors {sorted(grad_map)} do not match parameters {sorted(param_map)}"
        )
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_values: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in param_map.items():
        g = grad_map[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name}{context}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_values[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name] = m
        new_v[name] = v
    updated = ModelParams(
        EE=new_values.get("EE"),
        P_w=new_values.get("P_w"),
        P_e=new_values.get("P_e"),
        W_o=new_values["W_o"],
        b_o=new_values["b_o"],
    )
    return updated, AdamState(m=new_m, v=new_v, t=t)


def _prepared_inputs(dataset: Dataset, store: EmbeddingStore, cfg: TrainConfig):
    out = []
    for inst in dataset.instances:
        inst = truncate_instance(inst, cfg.max_len)
        we, et = instance_inputs(cfg.model, inst, store)
        out.append((inst.id, we, et, inst.label))
    return out


def _mean_gradients(grad_list: list[Gradients]) -> Gradients:
    # summed in list order so results stay bit-reproducible
    first = grad_list[0]
    sums = {name: g.copy() for name, g in first.tensors().items()}
    for grads in grad_list[1:]:
        for name, g in grads.tensors().items():
            sums[name] += g
    scale = 1.0 / len(grad_list)
    for name in sums:
        sums[name] *= scale
    return Gradients(
        EE=sums.get("EE"),
        P_w=sums.get("P_w"),
        P_e=sums.get("P_e"),
        W_o=sums["W_o"],
        b_o=sums["b_o"],
    )


def train(
    train_set: Dataset,
    val_set: Dataset,
    store: EmbeddingStore,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[int, float, float, float], None]] = None,
) -> tuple[Checkpoint, History]:
    """Train with Adam on cross-entropy; return the best checkpoint and history.

    Each epoch shuffles the training set with a jumped PCG64 stream of
    cfg.seed, averages per-instance gradients within each batch (the last
    partial batch is kept) and applies one Adam step per batch. The
    checkpoint of the epoch with the lowest validation loss is returned;
    ties go to the earlier epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training requires non-empty train and validation datasets")
    train_inputs = _prepared_inputs(train_set, store, cfg)
    val_inputs = _prepared_inputs(val_set, store, cfg)

    params = init_params(cfg.model, cfg.seed)
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.Generator(np.random.PCG64(cfg.seed).jumped(1))

    history = History()
    best_params: Optional[ModelParams] = None
    best_loss = np.inf
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_inputs))
        epoch_losses: list[float] = []
        for batch_no, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            batch = order[start:start + cfg.batch_size]
            grad_list: list[Gradients] = []
            for idx in batch:
                ident, we, et, label = train_inputs[idx]
                loss, grads, _ = loss_and_gradients(params, cfg.model, we, et, label)
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss for instance {ident!r} "
                        f"(epoch {epoch}, batch {batch_no})"
                    )
                epoch_losses.append(loss)
                grad_list.append(grads)
            params, state = adam_step(
                params, _mean_gradients(grad_list), state, cfg,
                context=f" (epoch {epoch}, batch {batch_no})",
            )

        val_losses = []
        correct = 0
        for _ident, we, et, label in val_inputs:
            trace = forward(params, cfg.model, we, et)
            val_losses.append(cross_entropy(trace.y, label))
            if int(np.argmax(trace.y)) == label:
                correct += 1
        train_loss = float(np.mean(epoch_losses))
        val_loss = float(np.mean(val_losses))
        val_acc = correct / len(val_inputs)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = params.copy()

    assert best_params is not None
    manifest = make_manifest(cfg, epoch=best_epoch, val_loss=best_loss)
    return Checkpoint(manifest=manifest, params=best_params), history


def model_config_to_dict(config: ModelConfig) -> dict:
    return {
        "d_w": config.d_w,
        "d_p": config.d_p,
        "d_e": config.d_e,
        "C": config.C,
        "scheme": config.scheme.variant.value,
        "el_threshold": config.scheme.el_threshold,
        "use_projection": config.use_projection,
        "use_attention": config.use_attention,
        "entity_onehot": config.entity_onehot,
        "k": config.k,
    }


def model_config_from_dict(data: dict) -> ModelConfig:
    scheme = EntityScheme(SchemeVariant(data["scheme"]), data["el_threshold"])
    return ModelConfig(
        d_w=data["d_w"],
        d_p=data["d_p"],
        d_e=data["d_e"] or None,
        C=data["C"],
        scheme=scheme,
        use_projection=data["use_projection"],
        use_attention=data["use_attention"],
        entity_onehot=data["entity_onehot"],
        k=data["k"] or None,
    )


def make_manifest(cfg: TrainConfig, epoch: int, val_loss: float) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model": model_config_to_dict(cfg.model),
        "train": {
            "learning_rate": cfg.learning_rate,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "adam_beta1": cfg.adam_beta1,
            "adam_beta2": cfg.adam_beta2,
            "adam_eps": cfg.adam_eps,
            "seed": cfg.seed,
            "max_len": cfg.max_len,
        },
        "tag_ordering": tag_ordering_string(),
        "epoch": epoch,
        "val_loss": val_loss,
    }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write manifest + raw tensors; identical checkpoints are byte-identical."""
    path = Path(path)
    manifest_line = json.dumps(ckpt.manifest, sort_keys=True, separators=(",", ":"))
    with path.open("wb") as fh:
        fh.write(manifest_line.encode("utf-8"))
        fh.write(b"\n")
        fh.write(_MARKER)
        for tensor in ckpt.params.tensors().values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint, validating version, tag ordering and tensor sizes."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError(f"checkpoint {path}: missing manifest line")
    try:
        manifest = json.loads(blob[:newline].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise DataError(f"checkpoint {path}: malformed manifest") from None
    body = blob[newline + 1:]
    if not body.startswith(_MARKER):
        raise DataError(f"checkpoint {path}: missing tensor marker")
    payload = body[len(_MARKER):]

    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path}: unsupported format version {manifest.get('format_version')!r}"
        )
    if manifest.get("tag_ordering") != tag_ordering_string():
        raise DataError(
            f"checkpoint {path}: incompatible entity-tag ordering "
            f"{manifest.get('tag_ordering')!r}"
        )
    try:
        config = model_config_from_dict(manifest["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint {path}: invalid model config: {exc}") from None

    shapes = param_shapes(config)
    expected = sum(int(np.prod(shape)) for shape in shapes.values()) * 8
    if len(payload) != expected:
        raise DataError(
            f"checkpoint {path}: corrupt tensor payload "
            f"(expected {expected} bytes, found {len(payload)})"
        )
    values: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes.items():
        nbytes = int(np.prod(shape)) * 8
        flat = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8")
        values[name] = flat.reshape(shape).astype(np.float64)
        offset += nbytes
    params = ModelParams(
        EE=values.get("EE"),
        P_w=values.get("P_w"),
        P_e=values.get("P_e"),
        W_o=values["W_o"],
        b_o=values["b_o"],
    )
    return Checkpoint(manifest=manifest, params=params)
