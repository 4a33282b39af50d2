"""Entity-aware classification head with an exact manual backward pass.

Forward pipeline over one token sequence:

1. entity-type lookup: ee_i = EE[et_i] (or a k-dim one-hot when the
   embedding layer is ablated away),
2. projection and additive fusion: h_i = P_w(we_i) + P_e(ee_i),
3. scaled dot-product self-attention over H with divisor sqrt(width),
4. mean pooling of the attended vectors into the sentence embedding,
5. linear layer + softmax into class probabilities.

Word embeddings are frozen inputs and receive no gradient; the trainable
tensors are EE, P_w, P_e, W_o and b_o. Ablation flags remove the
projection (attention then runs directly on the input width), the
attention (plain mean pooling of H), or the entity-embedding table
(one-hot entity vectors fed straight into P_e). All arithmetic is
64-bit; softmaxes subtract the row maximum for stability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .corpus import ClaimInstance
from .embeddings import EmbeddingStore
from .entity_typing import EntityScheme, SchemeVariant, assign_indices, scheme_cardinality
from .errors import ConfigError, DataError

CE_CLAMP = 1e-12

_DEFAULT_ENTITY_DIM = {
    SchemeVariant.NER: 128,
    SchemeVariant.NER_POPULARITY: 256,
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches.

    ``k`` defaults to the scheme's cardinality and exists as an explicit
    field so reduced taxonomies can be exercised in tests; ``d_e``
    defaults to 128 under NER and 256 under NER_POPULARITY.
    """

    d_w: int
    scheme: EntityScheme
    d_p: int = 256
    d_e: Optional[int] = None
    C: int = 2
    use_projection: bool = True
    use_attention: bool = True
    entity_onehot: bool = False
    k: Optional[int] = None

    def __post_init__(self) -> None:
        if self.d_w < 1 or self.d_p < 1 or self.C < 1:
            raise ConfigError("d_w, d_p and C must all be >= 1")
        if self.scheme.variant is SchemeVariant.NONE:
            if self.entity_onehot:
                raise ConfigError("entity_onehot requires an entity scheme")
            object.__setattr__(self, "k", 0)
            object.__setattr__(self, "d_e", 0)
            return
        k = self.k if self.k is not None else scheme_cardinality(self.scheme)
        if k < 1:
            raise ConfigError(f"entity cardinality must be >= 1, got {k}")
        object.__setattr__(self, "k", k)
        if self.entity_onehot:
            if self.d_e is not None and self.d_e != k:
                raise ConfigError(
                    f"one-hot entity channel requires d_e == k ({k}), got {self.d_e}"
                )
            object.__setattr__(self, "d_e", k)
        elif self.d_e is None:
            object.__setattr__(self, "d_e", _DEFAULT_ENTITY_DIM[self.scheme.variant])
        elif self.d_e < 1:
            raise ConfigError(f"d_e must be >= 1, got {self.d_e}")

    @property
    def has_entity_channel(self) -> bool:
        return self.scheme.variant is not SchemeVariant.NONE

    @property
    def pooled_dim(self) -> int:
        """Width of H and of the sentence embedding."""
        return self.d_p if self.use_projection else self.d_w


@dataclass
class ModelParams:
    """Trainable tensors. Absent tensors are None under the matching config."""

    EE: Optional[np.ndarray]   # (k, d_e) entity-type embedding table
    P_w: Optional[np.ndarray]  # (d_p, d_w) word projection
    P_e: Optional[np.ndarray]  # (d_p, d_e) entity projection
    W_o: np.ndarray            # (C, pooled_dim) output layer
    b_o: np.ndarray            # (C,)

    _ORDER = ("EE", "P_w", "P_e", "W_o", "b_o")

    def tensors(self) -> dict[str, np.ndarray]:
        """Present tensors in the fixed serialization order."""
        out: dict[str, np.ndarray] = {}
        for name in self._ORDER:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            EE=None if self.EE is None else self.EE.copy(),
            P_w=None if self.P_w is None else self.P_w.copy(),
            P_e=None if self.P_e is None else self.P_e.copy(),
            W_o=self.W_o.copy(),
            b_o=self.b_o.copy(),
        )


@dataclass
class Gradients:
    """Loss gradients, shaped like ModelParams (None where the tensor is absent)."""

    EE: Optional[np.ndarray]
    P_w: Optional[np.ndarray]
    P_e: Optional[np.ndarray]
    W_o: np.ndarray
    b_o: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in ModelParams._ORDER:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


@dataclass
class ForwardTrace:
    """Cached intermediates of one forward pass.

    ``A`` is None when the attention layer is ablated; ``Z`` then simply
    aliases ``H``.
    """

    H: np.ndarray
    A: Optional[np.ndarray]
    Z: np.ndarray
    se: np.ndarray
    logits: np.ndarray
    y: np.ndarray
    entity_features: Optional[np.ndarray] = field(default=None, repr=False)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of the present tensors, in serialization order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if config.has_entity_channel and not config.entity_onehot:
        shapes["EE"] = (config.k, config.d_e)
    if config.use_projection:
        shapes["P_w"] = (config.d_p, config.d_w)
        if config.has_entity_channel:
            shapes["P_e"] = (config.d_p, config.d_e)
    shapes["W_o"] = (config.C, config.pooled_dim)
    shapes["b_o"] = (config.C,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization from a PCG64 generator.

    Matrices are drawn i.i.d. uniform on +/- sqrt(6 / (rows + cols)) in
    the fixed order EE, P_w, P_e, W_o (absent tensors skipped); b_o
    starts at zero.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = param_shapes(config)
    values: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name == "b_o":
            values[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            values[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(
        EE=values.get("EE"),
        P_w=values.get("P_w"),
        P_e=values.get("P_e"),
        W_o=values["W_o"],
        b_o=values["b_o"],
    )


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _entity_features(
    params: ModelParams, config: ModelConfig, et: Sequence[int], n: int
) -> np.ndarray:
    et_arr = np.asarray(et, dtype=np.intp)
    if et_arr.shape != (n,):
        raise DataError(f"entity indices have length {et_arr.shape}, expected ({n},)")
    if et_arr.size and (et_arr.min() < 0 or et_arr.max() >= config.k):
        raise DataError(f"entity index out of range [0, {config.k})")
    if config.entity_onehot:
        onehot = np.zeros((n, config.k))
        onehot[np.arange(n), et_arr] = 1.0
        return onehot
    assert params.EE is not None
    if params.EE.shape != (config.k, config.d_e):
        raise DataError(f"EE has shape {params.EE.shape}, expected {(config.k, config.d_e)}")
    return params.EE[et_arr]


def _pad_to_width(matrix: np.ndarray, width: int) -> np.ndarray:
    """Entity features under the no-projection ablation: pad or cut to d_w."""
    n, cols = matrix.shape
    if cols == width:
        return matrix
    out = np.zeros((n, width))
    m = min(cols, width)
    out[:, :m] = matrix[:, :m]
    return out


def forward(
    params: ModelParams,
    config: ModelConfig,
    we: np.ndarray,
    et: Optional[Sequence[int]] = None,
) -> ForwardTrace:
    """Run the full pipeline over one sequence and cache intermediates.

    ``et`` must be given exactly when the config carries an entity
    scheme. Attention scores are divided by the square root of H's
    actual width (d_p, or d_w when the projection is ablated).
    """
    we = np.asarray(we, dtype=np.float64)
    if we.ndim != 2 or we.shape[0] < 1:
        raise DataError(f"word embeddings must be a non-empty 2-D matrix, got {we.shape}")
    n = we.shape[0]
    if we.shape[1] != config.d_w:
        raise DataError(f"word embeddings have width {we.shape[1]}, config d_w={config.d_w}")
    if config.has_entity_channel:
        if et is None:
            raise DataError("entity indices required for this scheme")
        ee = _entity_features(params, config, et, n)
    else:
        if et is not None:
            raise DataError("entity indices passed to an entity-free model")
        ee = None

    if config.use_projection:
        assert params.P_w is not None
        H = we @ params.P_w.T
        if ee is not None:
            assert params.P_e is not None
            H = H + ee @ params.P_e.T
    else:
        H = we if ee is None else we + _pad_to_width(ee, config.d_w)

    if config.use_attention:
        scale = math.sqrt(H.shape[1])
        A = _softmax_rows(H @ H.T / scale)
        Z = A @ H
    else:
        A = None
        Z = H

    se = Z.mean(axis=0)
    logits = params.W_o @ se + params.b_o
    y = _softmax_rows(logits)
    return ForwardTrace(H=H, A=A, Z=Z, se=se, logits=logits, y=y, entity_features=ee)


def cross_entropy(y: np.ndarray, label: int) -> float:
    """Negative log-probability of the gold class, clamped at 1e-12."""
    if not 0 <= label < y.shape[0]:
        raise DataError(f"label {label} outside [0, {y.shape[0]})")
    return float(-np.log(max(float(y[label]), CE_CLAMP)))


def backward(
    params: ModelParams,
    config: ModelConfig,
    we: np.ndarray,
    et: Optional[Sequence[int]],
    trace: ForwardTrace,
    label: int,
) -> Gradients:
    """Exact gradients of cross_entropy(forward(...)) for all trainable tensors.

    The attention Jacobian accounts for H appearing as queries, keys and
    values. Frozen word embeddings receive no gradient.
    """
    we = np.asarray(we, dtype=np.float64)
    n = we.shape[0]
    if trace.H.shape[0] != n:
        raise DataError("trace does not match the given inputs")
    if not 0 <= label < config.C:
        raise DataError(f"label {label} outside [0, {config.C})")

    g_logits = trace.y.copy()
    g_logits[label] -= 1.0

    gW_o = np.outer(g_logits, trace.se)
    gb_o = g_logits.copy()
    g_se = params.W_o.T @ g_logits

    # se = mean of Z rows
    G_Z = np.tile(g_se / n, (n, 1))

    if config.use_attention:
        A = trace.A
        assert A is not None
        H = trace.H
        scale = math.sqrt(H.shape[1])
        G_A = G_Z @ H.T
        # softmax backward, row-wise
        row_dot = (G_A * A).sum(axis=1, keepdims=True)
        G_S = A * (G_A - row_dot)
        # H appears in values (A^T G_Z) and in the scores S = H H^T / scale
        G_H = A.T @ G_Z + (G_S + G_S.T) @ H / scale
    else:
        G_H = G_Z

    gEE = gP_w = gP_e = None
    ee = trace.entity_features
    if config.use_projection:
        gP_w = G_H.T @ we
        if config.has_entity_channel:
            assert ee is not None and params.P_e is not None
            gP_e = G_H.T @ ee
            G_ee = G_H @ params.P_e
        else:
            G_ee = None
    else:
        if config.has_entity_channel:
            assert ee is not None
            G_ee = np.zeros_like(ee)
            m = min(ee.shape[1], config.d_w)
            G_ee[:, :m] = G_H[:, :m]
        else:
            G_ee = None

    if config.has_entity_channel and not config.entity_onehot:
        assert params.EE is not None and et is not None and G_ee is not None
        gEE = np.zeros_like(params.EE)
        np.add.at(gEE, np.asarray(et, dtype=np.intp), G_ee)

    return Gradients(EE=gEE, P_w=gP_w, P_e=gP_e, W_o=gW_o, b_o=gb_o)


def loss_and_gradients(
    params: ModelParams,
    config: ModelConfig,
    we: np.ndarray,
    et: Optional[Sequence[int]],
    label: int,
) -> tuple[float, Gradients, ForwardTrace]:
    trace = forward(params, config, we, et)
    loss = cross_entropy(trace.y, label)
    grads = backward(params, config, we, et, trace, label)
    return loss, grads, trace


def predict(
    params: ModelParams,
    config: ModelConfig,
    we: np.ndarray,
    et: Optional[Sequence[int]] = None,
) -> tuple[int, np.ndarray, ForwardTrace]:
    """Class with the highest probability; ties break toward the lower index."""
    trace = forward(params, config, we, et)
    return int(np.argmax(trace.y)), trace.y, trace


def instance_inputs(
    config: ModelConfig, inst: ClaimInstance, store: EmbeddingStore
) -> tuple[np.ndarray, Optional[list[int]]]:
    """Fetch and align one instance's model inputs.

    The stored matrix may carry more rows than the (possibly re-truncated)
    instance; extra rows are dropped from the head-truncated tail. Fewer
    rows than tokens is an error.
    """
    if store.d_w != config.d_w:
        raise DataError(f"store width {store.d_w} does not match config d_w {config.d_w}")
    we = store.fetch(inst.id)
    n = len(inst.tokens)
    if we.shape[0] < n:
        raise DataError(
            f"instance {inst.id!r}: store has {we.shape[0]} rows for {n} tokens"
        )
    if we.shape[0] > n:
        we = we[:n]
    et = assign_indices(config.scheme, inst) if config.has_entity_channel else None
    return we, et
