import json

import numpy as np
import pytest

from exclaim.corpus import Dataset
from exclaim.embeddings import open_store, write_store
from exclaim.entity_typing import EntityScheme, SchemeVariant
from exclaim.errors import ConfigError, DataError, NumericalError
from exclaim.model import ModelConfig, ModelParams, forward, init_params, instance_inputs
from exclaim.synthgen import GenSpec, LabelRule, generate
from exclaim.training import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    load_checkpoint,
    make_manifest,
    save_checkpoint,
    train,
)
from exclaim.model import Gradients

EXN = EntityScheme(SchemeVariant.NER)


def tiny_config(**kwargs):
    model = ModelConfig(d_w=16, d_p=8, d_e=4, k=16, scheme=EXN)
    defaults = dict(model=model, learning_rate=0.01, epochs=3, batch_size=8, seed=5)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def toy_problem(tmp_path_factory):
    """Small separable corpus: label = presence of a DIS tag."""
    spec = GenSpec(
        rule=LabelRule("entity_presence", tag="DIS"),
        n_instances=120, languages=("aa", "bb"), length_range=(4, 8),
        vocab_size=60, positive_rate=0.5, seed=3, embed_dim=16,
    )
    dataset, entries = generate(spec)
    path = tmp_path_factory.mktemp("toy") / "emb.exeb"
    write_store(entries, path)
    store = open_store(path)
    train_set = Dataset(name="train", instances=dataset.instances[:80])
    val_set = Dataset(name="val", instances=dataset.instances[80:120])
    return train_set, val_set, store


class TestTrainConfig:
    def test_rejects_bad_values(self):
        model = ModelConfig(d_w=4, d_p=2, scheme=EXN, d_e=2)
        with pytest.raises(ConfigError):
            TrainConfig(model=model, learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(model=model, epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(model=model, batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(model=model, adam_beta1=1.0)


class TestAdamStep:
    def test_zero_gradients_leave_params_unchanged(self):
        cfg = tiny_config()
        params = init_params(cfg.model, 0)
        state = AdamState.zeros_like(params)
        zero = Gradients(
            EE=np.zeros_like(params.EE),
            P_w=np.zeros_like(params.P_w),
            P_e=np.zeros_like(params.P_e),
            W_o=np.zeros_like(params.W_o),
            b_o=np.zeros_like(params.b_o),
        )
        updated, new_state = adam_step(params, zero, state, cfg)
        assert new_state.t == 1
        for name, tensor in params.tensors().items():
            np.testing.assert_array_equal(updated.tensors()[name], tensor)

    def test_first_step_magnitude_is_learning_rate(self):
        # single-parameter closed form: with g=1 at t=1, m_hat = v_hat = 1
        # so the update is -lr / (1 + eps)
        model = ModelConfig(d_w=1, d_p=1, scheme=EntityScheme(SchemeVariant.NONE), C=1)
        cfg = TrainConfig(model=model, learning_rate=0.25, seed=0)
        params = ModelParams(EE=None, P_w=np.zeros((1, 1)), P_e=None,
                             W_o=np.array([[2.0]]), b_o=np.array([0.0]))
        grads = Gradients(EE=None, P_w=np.zeros((1, 1)),
                          P_e=None, W_o=np.array([[1.0]]), b_o=np.array([0.0]))
        updated, state = adam_step(params, grads, AdamState.zeros_like(params), cfg)
        delta = updated.W_o[0, 0] - 2.0
        assert delta == pytest.approx(-0.25, rel=1e-6)
        assert state.t == 1

    def test_deterministic(self):
        cfg = tiny_config()
        params = init_params(cfg.model, 1)
        rng = np.random.default_rng(0)
        grads = Gradients(
            EE=rng.normal(size=params.EE.shape),
            P_w=rng.normal(size=params.P_w.shape),
            P_e=rng.normal(size=params.P_e.shape),
            W_o=rng.normal(size=params.W_o.shape),
            b_o=rng.normal(size=params.b_o.shape),
        )
        a1, _ = adam_step(params, grads, AdamState.zeros_like(params), cfg)
        a2, _ = adam_step(params, grads, AdamState.zeros_like(params), cfg)
        for name, tensor in a1.tensors().items():
            np.testing.assert_array_equal(tensor, a2.tensors()[name])

    def test_nan_gradient_aborts_naming_tensor(self):
        cfg = tiny_config()
        params = init_params(cfg.model, 1)
        grads = Gradients(
            EE=np.zeros_like(params.EE),
            P_w=np.full_like(params.P_w, np.nan),
            P_e=np.zeros_like(params.P_e),
            W_o=np.zeros_like(params.W_o),
            b_o=np.zeros_like(params.b_o),
        )
        with pytest.raises(NumericalError, match="P_w"):
            adam_step(params, grads, AdamState.zeros_like(params), cfg,
                      context=" (epoch 2, batch 3)")
        try:
            adam_step(params, grads, AdamState.zeros_like(params), cfg,
                      context=" (epoch 2, batch 3)")
        except NumericalError as exc:
            assert "epoch 2" in str(exc) and "batch 3" in str(exc)


class TestTrainLoop:
    def test_single_epoch_history(self, toy_problem):
        train_set, val_set, store = toy_problem
        ckpt, history = train(train_set, val_set, store, tiny_config(epochs=1))
        assert len(history.train_loss) == 1
        assert ckpt.manifest["epoch"] == 1

    def test_two_runs_identical(self, toy_problem):
        train_set, val_set, store = toy_problem
        cfg = tiny_config()
        ckpt1, hist1 = train(train_set, val_set, store, cfg)
        ckpt2, hist2 = train(train_set, val_set, store, cfg)
        assert hist1.to_dict() == hist2.to_dict()
        for name, tensor in ckpt1.params.tensors().items():
            np.testing.assert_array_equal(tensor, ckpt2.params.tensors()[name])

    def test_best_checkpoint_has_minimal_val_loss(self, toy_problem):
        train_set, val_set, store = toy_problem
        ckpt, history = train(train_set, val_set, store, tiny_config(epochs=5))
        best = ckpt.manifest["val_loss"]
        assert all(best <= v for v in history.val_loss)
        # earliest epoch wins ties / attains the minimum
        assert history.val_loss[ckpt.manifest["epoch"] - 1] == best
        assert history.val_loss.index(min(history.val_loss)) + 1 == ckpt.manifest["epoch"]

    def test_loss_decreases_on_separable_toy(self, toy_problem):
        train_set, val_set, store = toy_problem
        _, history = train(train_set, val_set, store, tiny_config(epochs=8))
        assert history.train_loss[-1] < history.train_loss[0]

    def test_empty_dataset_rejected(self, toy_problem):
        train_set, _, store = toy_problem
        empty = Dataset(name="empty", instances=[])
        with pytest.raises(DataError, match="non-empty"):
            train(empty, train_set, store, tiny_config())
        with pytest.raises(DataError, match="non-empty"):
            train(train_set, empty, store, tiny_config())

    def test_unresolvable_id_rejected(self, toy_problem):
        train_set, val_set, store = toy_problem
        from exclaim.corpus import ClaimInstance
        rogue = Dataset(name="rogue", instances=[ClaimInstance(
            id="not-in-store", lang="aa", tokens=("x",), label=0,
            ner_tags=("O",), el_logprobs=(None,),
        )])
        with pytest.raises(DataError, match="not-in-store"):
            train(rogue, val_set, store, tiny_config())

    def test_on_epoch_callback(self, toy_problem):
        train_set, val_set, store = toy_problem
        seen = []
        train(train_set, val_set, store, tiny_config(epochs=2),
              on_epoch=lambda e, tl, vl, va: seen.append(e))
        assert seen == [1, 2]

    def test_does_not_mutate_inputs(self, toy_problem):
        train_set, val_set, store = toy_problem
        before = [inst for inst in train_set.instances]
        train(train_set, val_set, store, tiny_config(epochs=1))
        assert train_set.instances == before


class TestCheckpointIO:
    def test_round_trip(self, toy_problem, tmp_path):
        train_set, val_set, store = toy_problem
        cfg = tiny_config(epochs=2)
        ckpt, _ = train(train_set, val_set, store, cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.manifest == ckpt.manifest
        for name, tensor in ckpt.params.tensors().items():
            np.testing.assert_array_equal(tensor, loaded.params.tensors()[name])
        # predictions bit-identical to the in-memory model
        inst = val_set.instances[0]
        config = loaded.model_config
        we, et = instance_inputs(config, inst, store)
        np.testing.assert_array_equal(
            forward(ckpt.params, cfg.model, we, et).y,
            forward(loaded.params, config, we, et).y,
        )

    def test_save_is_deterministic(self, toy_problem, tmp_path):
        train_set, val_set, store = toy_problem
        cfg = tiny_config(epochs=1)
        ckpt, _ = train(train_set, val_set, store, cfg)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        save_checkpoint(ckpt, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_tensors_detected(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg.model, 0)
        ckpt = Checkpoint(manifest=make_manifest(cfg, epoch=1, val_loss=0.5), params=params)
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(DataError, match="corrupt"):
            load_checkpoint(path)

    def test_tag_ordering_mismatch_detected(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg.model, 0)
        ckpt = Checkpoint(manifest=make_manifest(cfg, epoch=1, val_loss=0.5), params=params)
        path = tmp_path / "model.ckpt"
        ckpt.manifest["tag_ordering"] = "LOC,PER"
        save_checkpoint(ckpt, path)
        with pytest.raises(DataError, match="tag ordering"):
            load_checkpoint(path)

    def test_version_mismatch_detected(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg.model, 0)
        ckpt = Checkpoint(manifest=make_manifest(cfg, epoch=1, val_loss=0.5), params=params)
        ckpt.manifest["format_version"] = 99
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)

    def test_manifest_is_json_line(self, toy_problem, tmp_path):
        train_set, val_set, store = toy_problem
        ckpt, _ = train(train_set, val_set, store, tiny_config(epochs=1))
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        first_line = path.read_bytes().split(b"\n", 1)[0]
        manifest = json.loads(first_line)
        assert manifest["format_version"] == 1
        assert manifest["model"]["scheme"] == "ner"
        assert manifest["train"]["batch_size"] == 8
        assert manifest["tag_ordering"].startswith("PER,ORG,LOC")
