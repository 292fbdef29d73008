import json

import numpy as np
import pytest

from jpave.AbstractJpave import value_key
from jpave.Classes import Prediction
from jpave.Cli import ABLATIONS
from jpave.Cli import ablation_slug
from jpave.Cli import build_parser
from jpave.Cli import resolve_config
from jpave.Cli import run
from jpave.Data import SynthConfig
from jpave.Data import load_jsonl
from jpave.Data import load_schema
from jpave.Data import save_jsonl
from jpave.Data import save_predictions
from jpave.Data import synth_generate
from jpave.Data import zero_shot_split
from jpave.Enums import TokenizeMode
from jpave.Enums import Variant
from jpave.Storage import save_embeddings
from jpave.Training import Checkpoint
from jpave.Training import TrainConfig
from jpave.Training import evaluate_model
from jpave.Training import train

WS = TokenizeMode.WHITESPACE
TINY_MODEL = ["--d-a", "8", "--encoder-hidden", "4", "--epochs", "1", "--batch-size", "8"]


@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / "data"
    argv = ["synth", "--out", str(out), "--seed", "3", "--n-attributes", "2", "--values-per-attribute", "3"]
    argv += ["--n-train", "12", "--n-val", "4", "--n-test", "6", "--heldout-fraction", "0.3", "--l-max", "8"]
    assert run(argv) == 0
    return out


def test_synth_writes_dataset(corpus):
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "schema.json", "config.json", "manifest.json"):
        assert (corpus / name).is_file()
    assert len(load_jsonl(corpus / "train.jsonl", WS)) == 12
    assert json.loads((corpus / "config.json").read_text()) == {"tokenize": "whitespace", "l_max": 8}
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["subcommand"] == "synth"
    assert manifest["seed"] == 3
    assert "schema.json" in manifest["outputs"]


def test_eval_perfect_predictions(tmp_path):
    _, _, test, _ = synth_generate(SynthConfig(n_train=20, n_val=0, n_test=10, seed=1))
    save_jsonl(tmp_path / "gold.jsonl", test, WS)
    predictions = [Prediction(g.id, frozenset(g.attributes()), frozenset(g.pairs())) for g in test]
    save_predictions(tmp_path / "pred.jsonl", predictions, ["color", "material", "style", "pattern", "technology"])

    out = tmp_path / "eval"
    argv = ["eval", "--out", str(out), "--predictions", str(tmp_path / "pred.jsonl")]
    argv += ["--gold", str(tmp_path / "gold.jsonl"), "--tokenize", "whitespace"]
    assert run(argv) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["value"]["f1"] == 1.0
    assert report["jacc"] == 1.0
    assert (out / "per_attribute.csv").is_file()


def test_permute_is_deterministic(corpus, tmp_path):
    outputs = []
    for name in ("a", "b"):
        argv = ["permute", "--out", str(tmp_path / name), "--data-dir", str(corpus), "--seed", "7"]
        assert run(argv + ["--tokenize", "whitespace"]) == 0
        outputs.append((tmp_path / name / "test.permuted.jsonl").read_bytes())
    assert outputs[0] == outputs[1]


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--data-dir", "x", "--out", "y", "--no-such-flag"],
        ["fly"],
        ["eval", "--out", "y", "--predictions", "missing.jsonl", "--gold", "missing.jsonl"],
        ["eval", "--out", "y"],
    ],
)
def test_user_errors_exit_one(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    assert "error:" in capsys.readouterr().err


def test_variant_flag_conflict_exits_one(corpus, tmp_path):
    argv = ["train", "--data-dir", str(corpus), "--out", str(tmp_path / "run"), "--variant", "cls", "--no-copy"]
    assert run(argv) == 1


def test_gradcheck_exit_codes(capsys):
    assert run(["gradcheck", "--variant", "cls"]) == 0
    assert "ok" in capsys.readouterr().out
    assert run(["gradcheck", "--variant", "cls", "--tolerance", "0"]) == 2


def test_config_precedence(corpus, tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"seed": 5, "epochs": 9, "tokenize": "whitespace"}), encoding="utf-8")
    args = build_parser().parse_args(
        ["train", "--data-dir", str(corpus), "--out", "o", "--config", str(config_path), "--epochs", "2"]
    )
    config, path = resolve_config(args)
    assert path == str(config_path)
    assert (config.seed, config.epochs) == (5, 2)

    args = build_parser().parse_args(["train", "--data-dir", str(corpus), "--out", "o"])
    config, path = resolve_config(args)
    assert path.endswith("config.json")
    assert (config.tokenize, config.l_max) == (WS, 8)


def test_threshold_on_generation_warns(tmp_path):
    args = build_parser().parse_args(["train", "--data-dir", str(tmp_path), "--out", "o", "--threshold", "0.3"])
    with pytest.warns(UserWarning, match="cls variant"):
        config, _ = resolve_config(args)
    assert config.variant is Variant.GEN
    assert config.threshold == 0.3


def test_train_eval_zeroshot_pipeline(corpus, tmp_path):
    run_dir = tmp_path / "run"
    assert run(["train", "--data-dir", str(corpus), "--out", str(run_dir), "--variant", "cls"] + TINY_MODEL) == 0
    for name in ("best.ckpt", "last.ckpt", "history.json", "manifest.json"):
        assert (run_dir / name).is_file()
    checkpoint = run_dir / "best.ckpt"
    before = checkpoint.read_bytes()

    eval_dir = tmp_path / "eval"
    argv = ["eval", "--out", str(eval_dir), "--checkpoint", str(checkpoint), "--data-dir", str(corpus)]
    assert run(argv + ["--permute-seed", "1"]) == 0
    assert checkpoint.read_bytes() == before
    report = json.loads((eval_dir / "report.json").read_text())
    assert report["n_total"] == 6
    assert "unseen" in report
    assert (eval_dir / "report.permuted.json").is_file()
    assert len((eval_dir / "predictions.jsonl").read_text().splitlines()) == 6

    zs_dir = tmp_path / "zeroshot"
    argv = ["zeroshot", "--out", str(zs_dir), "--checkpoint", str(checkpoint), "--data-dir", str(corpus)]
    assert run(argv) == 0
    summary = json.loads((zs_dir / "zeroshot.json").read_text())
    # classification never outputs a value it did not see in training
    assert summary["unseen"]["pred_total"] == 0
    assert summary["unseen"]["recall"] == 0.0


def test_mistyped_config_file_exits_one(corpus, tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"l_max": "20"}), encoding="utf-8")
    argv = ["train", "--data-dir", str(corpus), "--out", str(tmp_path / "run"), "--config", str(config_path)]
    assert run(argv) == 1
    assert "l_max" in capsys.readouterr().err


def test_eval_writes_generation_traces(corpus, tmp_path):
    run_dir = tmp_path / "run"
    assert run(["train", "--data-dir", str(corpus), "--out", str(run_dir)] + TINY_MODEL) == 0
    eval_dir = tmp_path / "eval"
    argv = ["eval", "--out", str(eval_dir), "--checkpoint", str(run_dir / "best.ckpt"), "--data-dir", str(corpus)]
    assert run(argv + ["--traces"]) == 0

    attributes = load_schema(corpus / "schema.json", WS).attributes
    lines = [json.loads(line) for line in (eval_dir / "traces.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [line["id"] for line in lines] == [i.id for i in load_jsonl(corpus / "test.jsonl", WS)]
    for line in lines:
        assert [t["attribute"] for t in line["traces"]] == attributes
        for trace in line["traces"]:
            assert 1 <= len(trace["token_ids"]) == len(trace["p_gen"])
            assert all(0.0 <= p <= 1.0 for p in trace["p_gen"])
    manifest = json.loads((eval_dir / "manifest.json").read_text())
    assert "traces.jsonl" in manifest["outputs"]


def test_traces_on_classification_checkpoint_exits_one(corpus, tmp_path):
    run_dir = tmp_path / "run"
    assert run(["train", "--data-dir", str(corpus), "--out", str(run_dir), "--variant", "cls"] + TINY_MODEL) == 0
    argv = ["eval", "--out", str(tmp_path / "eval"), "--checkpoint", str(run_dir / "best.ckpt")]
    assert run(argv + ["--data-dir", str(corpus), "--traces"]) == 1
    assert not (tmp_path / "eval" / "traces.jsonl").exists()


def test_ablate_rows_match_individual_runs(corpus, tmp_path):
    schema = load_schema(corpus / "schema.json", WS)
    embeddings = tmp_path / "values.emb"
    keys = [value_key(v.attribute, v.value) for v in schema.values]
    save_embeddings(embeddings, keys, np.random.default_rng(0).normal(size=(len(keys), 8)))

    out = tmp_path / "ablate"
    argv = ["ablate", "--data-dir", str(corpus), "--out", str(out), "--variant", "cls"]
    # a cls-only embedding file must not leak into the gen rows
    assert run(argv + ["--value-embedding-file", str(embeddings)] + TINY_MODEL) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [row["name"] for row in rows] == [name for name, _, _ in ABLATIONS]
    assert len((out / "ablation.csv").read_text().splitlines()) == len(ABLATIONS) + 1

    train_set, val_set, test_set = (load_jsonl(corpus / f"{s}.jsonl", WS, 8) for s in ("train", "val", "test"))
    unseen = zero_shot_split(train_set, test_set)[1]
    for row, (name, variant, flags) in zip(rows, ABLATIONS):
        settings = dict(variant=variant, d_a=8, encoder_hidden=4, epochs=1, train_batch_size=8, tokenize=WS, l_max=8)
        settings.update(flags)
        if variant is Variant.CLS and not flags.get("rand_value_emb"):
            settings["value_embedding_file"] = str(embeddings)
        single = train(TrainConfig(**settings), train_set, val_set, schema).best
        saved = Checkpoint.load(out / ablation_slug(name) / "best.ckpt")
        assert saved.config == single.config, name
        assert set(saved.params) == set(single.params), name
        assert all(np.array_equal(saved.params[k], v) for k, v in single.params.items()), name

        report = evaluate_model(single.to_model(), test_set, unseen)
        assert row["variant"] == variant.value
        assert row["best_epoch"] == single.epoch
        assert (row["attribute_f1"], row["value_f1"], row["jacc"]) == (
            report.attribute.f1,
            report.value.f1,
            report.jacc,
        ), name
