"""Shared test utilities: finite-difference oracle and config enumeration."""

from __future__ import annotations

import numpy as np

from exclaim.entity_typing import EntityScheme, SchemeVariant
from exclaim.model import ModelConfig, ModelParams, cross_entropy, forward

FD_STEP = 1e-5


def finite_difference_grads(
    params: ModelParams,
    config: ModelConfig,
    we: np.ndarray,
    et,
    label: int,
    step: float = FD_STEP,
) -> dict[str, np.ndarray]:
    """Central finite differences of cross_entropy(forward(...)), per tensor."""

    def loss_with(p: ModelParams) -> float:
        return cross_entropy(forward(p, config, we, et).y, label)

    out: dict[str, np.ndarray] = {}
    for name in params.tensors():
        base = getattr(params, name)
        fd = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = params.copy()
            getattr(plus, name)[idx] += step
            minus = params.copy()
            getattr(minus, name)[idx] -= step
            fd[idx] = (loss_with(plus) - loss_with(minus)) / (2.0 * step)
        out[name] = fd
    return out


def max_relative_error(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float((np.abs(analytic - fd) / denom).max())


def gradcheck_configs(d_w: int = 8, d_p: int = 4, d_e: int = 3) -> list[ModelConfig]:
    """All 20 scheme/ablation combinations at gradient-check scale."""
    ner = EntityScheme(SchemeVariant.NER)
    pop = EntityScheme(SchemeVariant.NER_POPULARITY)
    entity_variants = [
        dict(scheme=EntityScheme(SchemeVariant.NONE)),
        dict(scheme=ner, d_e=d_e, k=5),
        dict(scheme=ner, k=16, entity_onehot=True),
        dict(scheme=pop, d_e=d_e, k=31),
        dict(scheme=pop, k=31, entity_onehot=True),
    ]
    configs = []
    for entity in entity_variants:
        for use_projection in (True, False):
            for use_attention in (True, False):
                configs.append(ModelConfig(
                    d_w=d_w, d_p=d_p,
                    use_projection=use_projection,
                    use_attention=use_attention,
                    **entity,
                ))
    return configs


def random_inputs(rng: np.random.Generator, config: ModelConfig, n: int):
    we = rng.normal(size=(n, config.d_w))
    et = list(rng.integers(0, config.k, size=n)) if config.has_entity_channel else None
    return we, et
