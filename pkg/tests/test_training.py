import json

import numpy as np
import pytest

from jpave.AttributePredictor import ATTR_EMBEDDING
from jpave.Classes import ProductInstance
from jpave.Classifier import VALUE_EMBEDDING
from jpave.Enums import TokenizeMode
from jpave.Enums import Variant
from jpave.Exceptions import CheckpointError
from jpave.Exceptions import ConfigError
from jpave.Exceptions import DataError
from jpave.Exceptions import TrainingDivergedError
from jpave.Numkit import add
from jpave.Numkit import add_all
from jpave.Numkit import grad_check
from jpave.Storage import read_container
from jpave.Storage import write_container
from jpave.Training import Checkpoint
from jpave.Training import TrainConfig
from jpave.Training import build_model
from jpave.Training import clip_gradients
from jpave.Training import joint_loss
from jpave.Training import joint_loss_cls
from jpave.Training import joint_loss_gen
from jpave.Training import predict_batches
from jpave.Training import train


def _small(model, **overrides):
    return model.config.replace(train_batch_size=2, **overrides)


def _train(model, batch, **overrides):
    return train(_small(model, **overrides), batch, schema=model.schema, vocab=model.vocab)


@pytest.mark.parametrize("fixture", ["toy_gen", "toy_cls"])
def test_joint_loss_gradients(request, fixture):
    model, batch = request.getfixturevalue(fixture)
    assert grad_check(lambda p: joint_loss(batch, model), model.params, eps=1e-5) <= 1e-4


def test_joint_loss_is_sum_of_parts(toy_gen, toy_cls):
    for model, batch in (toy_gen, toy_cls):
        parts = [add(*model.instance_losses(instance)) for instance in batch]
        assert joint_loss(batch, model).data.tobytes() == add_all(parts).data.tobytes()


def test_joint_loss_without_attribute_term(toy_gen):
    model, batch = toy_gen
    config = model.config.replace(no_apred=True)
    ablated = build_model(config, model.vocab, model.schema, model.params)
    values = [ablated.instance_losses(instance)[1] for instance in batch]
    assert joint_loss_gen(batch, ablated).item() == add_all(values).item()


def test_variant_specific_losses(toy_gen, toy_cls):
    with pytest.raises(ConfigError):
        joint_loss_cls(*reversed(toy_gen))
    with pytest.raises(ConfigError):
        joint_loss_gen(*reversed(toy_cls))


def test_generation_order_does_not_change_loss(toy_gen):
    model, batch = toy_gen
    for instance in batch:
        attr_a, value_a = model.instance_losses(instance)
        attr_b, value_b = model.instance_losses(instance, order=[2, 1, 0])
        assert value_a.data.tobytes() == value_b.data.tobytes()
        assert attr_a.data.tobytes() == attr_b.data.tobytes()


def test_batch_gradient_is_sum_of_instance_gradients(toy_cls):
    model, batch = toy_cls
    grads = []
    for instance in batch:
        model.params.zero_grad()
        joint_loss([instance], model).backward()
        grads.append({p.name: p.grad.copy() for p in model.params})
    model.params.zero_grad()
    joint_loss(batch, model).backward()
    for p in model.params:
        assert np.allclose(p.grad, grads[0][p.name] + grads[1][p.name], atol=1e-12)


def test_non_finite_loss_names_instance(toy_cls):
    model, batch = toy_cls
    model.params["classifier.W_out"].data[...] = np.nan
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            joint_loss(batch, model, epoch=3, step=1)
    assert info.value.instance_id == "toy-1"
    assert info.value.epoch == 3


def test_clip_gradients(toy_gen):
    model, _ = toy_gen
    for p in model.params:
        p.grad = np.full_like(p.data, 3.0)
    norm = clip_gradients(model.params, 1.0)
    assert norm == pytest.approx(3.0 * np.sqrt(model.params.size()))
    assert model.params.grad_norm() == pytest.approx(1.0)


@pytest.mark.parametrize("fixture", ["toy_gen", "toy_cls"])
def test_zero_epochs_returns_initial_parameters(request, fixture):
    model, batch = request.getfixturevalue(fixture)
    result = _train(model, batch, epochs=0)
    # the classification head only covers values seen in the batch
    initial = build_model(result.best.config, model.vocab, result.best.schema).params.snapshot()
    assert set(result.best.params) == set(initial)
    for name, value in initial.items():
        assert np.array_equal(result.best.params[name], value)
    assert result.history == []


@pytest.mark.parametrize("fixture", ["toy_gen", "toy_cls"])
def test_same_seed_gives_identical_checkpoints(request, fixture, tmp_path):
    model, batch = request.getfixturevalue(fixture)
    first = _train(model, batch, epochs=2)
    second = _train(model, batch, epochs=2)
    first.last.save(tmp_path / "a.ckpt")
    second.last.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    other = _train(model, batch, epochs=2, seed=4)
    assert not all(np.array_equal(other.last.params[k], v) for k, v in first.last.params.items())


def test_zero_learning_rate_keeps_parameters(toy_gen):
    model, batch = toy_gen
    result = _train(model, batch, epochs=2, learning_rate=0.0)
    for name, value in model.params.snapshot().items():
        assert np.array_equal(result.last.params[name], value)
    assert len(result.history) == 2


def test_frozen_embeddings_stay_constant(toy_gen, toy_cls):
    model, batch = toy_gen
    result = _train(model, batch, epochs=2, freeze_attr_emb=True)
    assert np.array_equal(result.last.params[ATTR_EMBEDDING], model.params[ATTR_EMBEDDING].data)
    assert ATTR_EMBEDDING in result.last.frozen

    model, batch = toy_cls
    initial = _train(model, batch, epochs=0, freeze_value_emb=True).best.params
    result = _train(model, batch, epochs=2, freeze_value_emb=True)
    assert np.array_equal(result.last.params[VALUE_EMBEDDING], initial[VALUE_EMBEDDING])
    assert not np.array_equal(result.last.params["classifier.W_out"], initial["classifier.W_out"])


def test_attribute_embeddings_start_from_name_tokens(toy_gen):
    model, _ = toy_gen
    E = model.params["embedding.E"].data
    color = model.vocab.token_to_id["color"]
    assert np.array_equal(model.params[ATTR_EMBEDDING].data[0], E[[color]].mean(axis=0))

    rand = build_model(model.config.replace(rand_attr_emb=True), model.vocab, model.schema)
    assert not np.array_equal(rand.params[ATTR_EMBEDDING].data[0], E[color])
    # the uniform draw happens either way, so later tensors match
    assert np.array_equal(rand.params["generator.W_cm"].data, model.params["generator.W_cm"].data)


def test_checkpoint_round_trip(toy_gen, toy_cls, tmp_path):
    for model, batch in (toy_gen, toy_cls):
        path = tmp_path / f"{model.variant.value}.ckpt"
        Checkpoint.from_model(model, epoch=4).save(path)
        loaded = Checkpoint.load(path)
        assert loaded.epoch == 4
        restored = loaded.to_model()
        for instance in batch:
            a = add(*model.instance_losses(instance))
            b = add(*restored.instance_losses(instance))
            assert a.data.tobytes() == b.data.tobytes()
            assert model.predict(instance) == restored.predict(instance)


def test_checkpoint_errors(toy_gen, tmp_path):
    model, _ = toy_gen
    other = tmp_path / "other.bin"
    write_container(other, {"kind": "embedding"}, [])
    with pytest.raises(CheckpointError):
        Checkpoint.load(other)

    checkpoint = Checkpoint.from_model(model)
    del checkpoint.params["generator.b_cm"]
    with pytest.raises(CheckpointError):
        checkpoint.to_model()


def test_classification_training_drops_unseen_values(toy_cls):
    model, batch = toy_cls
    result = train(_small(model, epochs=0), batch[:1], schema=model.schema, vocab=model.vocab)
    assert [v.pair for v in result.best.schema.values] == [("color", "red"), ("material", "silk")]


def test_train_rejects_empty_or_invalid_data(toy_gen):
    model, batch = toy_gen
    with pytest.raises(DataError):
        train(model.config, [])
    long = ProductInstance("long", tuple("a b c d e f g".split()), {})
    with pytest.raises(DataError):
        train(model.config, [long], schema=model.schema)


def test_train_with_validation_keeps_best_epoch(toy_gen):
    model, batch = toy_gen
    result = train(_small(model, epochs=3, patience=1), batch, batch, schema=model.schema, vocab=model.vocab)
    assert 1 <= len(result.history) <= 3
    assert all(r.report is not None for r in result.history)
    best_f1 = max(r.report.value.f1 for r in result.history)
    first_best = next(r.epoch for r in result.history if r.report.value.f1 == best_f1)
    assert result.best.epoch == first_best


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(d_a=8, encoder_hidden=3)
    with pytest.raises(ConfigError):
        TrainConfig(variant=Variant.CLS, no_copy=True)
    with pytest.raises(ConfigError):
        TrainConfig(variant=Variant.GEN, freeze_value_emb=True)
    with pytest.raises(ConfigError):
        TrainConfig(variant="bert")
    with pytest.raises(ConfigError):
        TrainConfig(threshold=1.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"hidden": 3})
    with pytest.raises(ConfigError):
        TrainConfig.from_json(tmp_path / "missing.json")

    config = TrainConfig(variant="cls", tokenize="whitespace")
    assert config.variant is Variant.CLS
    assert config.tokenize is TokenizeMode.WHITESPACE
    assert TrainConfig.from_dict(config.to_json()) == config
    assert config.replace(seed=None, epochs=3).epochs == 3
    assert config.replace(seed=None).seed == config.seed

    path = tmp_path / "config.json"
    path.write_text('{"variant": "gen", "d_a": 16, "encoder_hidden": 8}', encoding="utf-8")
    assert TrainConfig.from_json(path).d_a == 16


def test_eval_every_validates_sparsely(toy_gen):
    model, batch = toy_gen
    config = _small(model, epochs=5, eval_every=2, patience=0)
    result = train(config, batch, batch, schema=model.schema, vocab=model.vocab)
    validated = [r.epoch for r in result.history if r.report is not None]
    assert len(result.history) == 5
    assert validated == [2, 4, 5]
    assert result.best.epoch in validated
    assert result.history[0].to_json()["validation"] is None


def test_patience_counts_validations(toy_gen):
    model, batch = toy_gen
    config = _small(model, epochs=9, eval_every=3, patience=1, learning_rate=0.0)
    result = train(config, batch, batch, schema=model.schema, vocab=model.vocab)
    # a frozen model never improves after its first validation
    assert [r.epoch for r in result.history if r.report is not None] == [3, 6]
    assert len(result.history) == 6
    assert result.best.epoch == 3


@pytest.mark.parametrize(
    "settings",
    [
        {"l_max": "20"},
        {"epochs": 2.5},
        {"seed": True},
        {"learning_rate": "0.01"},
        {"no_copy": "yes"},
        {"embedding_file": 3},
        {"tokenize": ["char"]},
    ],
)
def test_config_rejects_mistyped_fields(settings):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(settings)


def test_config_casts_numeric_fields():
    config = TrainConfig(l_max=np.int64(12), learning_rate=1, no_copy=np.bool_(True))
    assert type(config.l_max) is int and config.l_max == 12
    assert type(config.learning_rate) is float
    assert config.no_copy is True
    assert json.dumps(config.to_json())
    with pytest.raises(ConfigError):
        TrainConfig.from_dict([])


def test_for_variant_clears_other_variant_fields():
    cls_config = TrainConfig(variant=Variant.CLS, value_embedding_file="v.emb", freeze_value_emb=True, seed=4)
    with pytest.raises(ConfigError):
        cls_config.replace(variant=Variant.GEN)

    gen_config = cls_config.for_variant(Variant.GEN, no_copy=True)
    assert gen_config.variant is Variant.GEN
    assert gen_config.value_embedding_file is None
    assert not gen_config.freeze_value_emb
    assert gen_config.no_copy and gen_config.seed == 4

    back = gen_config.for_variant(Variant.CLS, rand_value_emb=True)
    assert not (back.no_copy or back.no_apred)
    assert back.rand_value_emb and back.value_embedding_file is None


@pytest.mark.parametrize("field_name,value", [("config", {"l_max": "20"}), ("epoch", "four"), ("vocab", None)])
def test_checkpoint_with_bad_header_raises(toy_gen, tmp_path, field_name, value):
    model, _ = toy_gen
    path = tmp_path / "model.ckpt"
    Checkpoint.from_model(model).save(path)
    header, arrays = read_container(path)
    header[field_name] = value
    write_container(path, header, sorted(arrays.items()))
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)


@pytest.mark.parametrize("fixture", ["toy_gen", "toy_cls"])
def test_predict_batches_ignores_batch_size(request, fixture):
    model, batch = request.getfixturevalue(fixture)
    expected = model.predict_dataset(batch)
    assert predict_batches(model, batch) == expected
    assert predict_batches(model, batch, batch_size=1) == expected
