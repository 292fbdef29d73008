"""End-to-end training checks on the synthetic corpus.

Slow: run with ``pytest --runslow``.
"""
import pytest

from jpave.Cli import ABLATIONS
from jpave.Cli import run_ablation
from jpave.Data import SynthConfig
from jpave.Data import heldout_values
from jpave.Data import permute_dataset
from jpave.Data import synth_generate
from jpave.Data import zero_shot_split
from jpave.Enums import TokenizeMode
from jpave.Enums import Variant
from jpave.Training import TrainConfig
from jpave.Training import evaluate_model
from jpave.Training import train

pytestmark = pytest.mark.slow

WS = TokenizeMode.WHITESPACE


def _config(variant: Variant, seed: int = 0, **overrides) -> TrainConfig:
    settings = dict(
        variant=variant,
        l_max=20,
        d_a=32,
        encoder_hidden=16,
        tokenize=WS,
        train_batch_size=16,
        learning_rate=5e-3,
        epochs=200,
        patience=15,
        seed=seed,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def _overfit_config(variant: Variant, **overrides) -> TrainConfig:
    # small batches for more updates per epoch; validate sparsely and keep the best
    settings = dict(train_batch_size=4, epochs=120, eval_every=10, patience=0)
    settings.update(overrides)
    return _config(variant, **settings)


@pytest.fixture(scope="module")
def corpus():
    config = SynthConfig(n_train=200, n_val=50, n_test=50, heldout_fraction=0.2, l_max=20, seed=0)
    train_set, val_set, test_set, schema = synth_generate(config)
    return config, train_set, val_set, test_set, schema


@pytest.fixture(scope="module")
def gen_model(corpus):
    _, train_set, _, _, schema = corpus
    # model selection on the training data itself: this is an overfit run
    result = train(_overfit_config(Variant.GEN), train_set, train_set, schema)
    return result.best.to_model()


def test_generation_overfits_training_set(corpus, gen_model):
    _, train_set, _, _, _ = corpus
    report = evaluate_model(gen_model, train_set)
    assert report.value.f1 >= 0.99
    assert report.attribute.f1 >= 0.99


def test_classification_overfits_training_set(corpus):
    _, train_set, _, _, schema = corpus
    result = train(_overfit_config(Variant.CLS), train_set, train_set, schema)
    report = evaluate_model(result.best.to_model(), train_set)
    assert report.value.f1 >= 0.95


def test_zero_shot_direction(corpus):
    synth_config, train_set, val_set, test_set, schema = corpus
    _, unseen = zero_shot_split(train_set, test_set)
    assert unseen
    assert unseen <= heldout_values(synth_config, schema)

    wins = 0
    for seed in range(3):
        with_copy = train(_config(Variant.GEN, seed), train_set, val_set, schema).best.to_model()
        without = train(_config(Variant.GEN, seed, no_copy=True), train_set, val_set, schema).best.to_model()
        copy_f1 = evaluate_model(with_copy, test_set, unseen).unseen.f1
        plain_f1 = evaluate_model(without, test_set, unseen).unseen.f1
        wins += copy_f1 > plain_f1
    assert wins >= 2

    cls_model = train(_config(Variant.CLS), train_set, val_set, schema).best.to_model()
    assert evaluate_model(cls_model, test_set, unseen).unseen.recall == 0.0


def test_permutation_robustness(corpus, gen_model):
    _, _, _, test_set, _ = corpus
    plain = evaluate_model(gen_model, test_set).value.f1
    permuted = evaluate_model(gen_model, permute_dataset(test_set, 7, WS)).value.f1
    assert abs(plain - permuted) <= 0.10


def test_ablation_rows_match_individual_runs(corpus):
    _, train_set, val_set, test_set, schema = corpus
    _, unseen = zero_shot_split(train_set, test_set)
    base = _config(Variant.GEN, epochs=10)
    assert len(ABLATIONS) == 6
    for name, variant, flags in ABLATIONS:
        row, checkpoint = run_ablation(base, name, variant, flags, train_set, val_set, test_set, schema, unseen)
        single = train(_config(variant, epochs=10, **flags), train_set, val_set, schema)
        report = evaluate_model(single.best.to_model(), test_set, unseen)
        assert checkpoint.config == single.best.config, name
        assert row["best_epoch"] == single.best.epoch, name
        assert row["value_f1"] == report.value.f1, name
        assert row["attribute_f1"] == report.attribute.f1, name
        assert row["jacc"] == report.jacc, name


def test_attribute_predictor_ablation(corpus, gen_model):
    _, train_set, _, _, schema = corpus
    result = train(_overfit_config(Variant.GEN, no_apred=True), train_set, train_set, schema)
    ablated = evaluate_model(result.best.to_model(), train_set)
    joint = evaluate_model(gen_model, train_set)
    assert ablated.attribute.f1 < 0.9 < joint.attribute.f1
    assert abs(ablated.value.f1 - joint.value.f1) <= 0.02
