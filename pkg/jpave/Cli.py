"""Command-line entry point: ``jpave <subcommand> [flags]``.

Exit status is 0 on success, 1 on a user error (bad flags, missing or
malformed files) and 2 on an internal contract failure, including a
gradient check above its tolerance.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass
from dataclasses import field
from datetime import datetime
from datetime import timezone
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

from . import __version__
from .Constants import MANIFEST_FILE
from .Constants import SCHEMA_FILE
from .Constants import TEST_FILE
from .Constants import TRAIN_FILE
from .Constants import VAL_FILE
from .Data import SynthConfig
from .Data import load_jsonl
from .Data import load_predictions
from .Data import load_schema
from .Data import permute_dataset
from .Data import save_jsonl
from .Data import save_predictions
from .Data import save_schema
from .Data import synth_generate
from .Data import zero_shot_split
from .Enums import TokenizeMode
from .Enums import Variant
from .Exceptions import ConfigError
from .Exceptions import ContractError
from .Exceptions import DataError
from .Exceptions import UserError
from .JpaveGen import JpaveGen
from .Metrics import evaluate
from .Numkit import grad_check
from .Training import Checkpoint
from .Training import TrainConfig
from .Training import evaluate_model
from .Training import joint_loss
from .Training import predict_batches
from .Training import toy_problem
from .Training import train

logger = logging.getLogger(__name__)

DATASET_CONFIG_FILE = "config.json"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

ABLATION_FLAGS = ("no_copy", "no_apred", "freeze_attr_emb", "rand_attr_emb", "freeze_value_emb", "rand_value_emb")
ABLATIONS: Tuple[Tuple[str, Variant, Dict[str, bool]], ...] = (
    ("JPAVE-GEN w/o Copy", Variant.GEN, {"no_copy": True}),
    ("JPAVE-GEN w/o APred", Variant.GEN, {"no_apred": True}),
    ("JPAVE-GEN frz-AEmb", Variant.GEN, {"freeze_attr_emb": True}),
    ("JPAVE-GEN rnd-AEmb", Variant.GEN, {"rand_attr_emb": True}),
    ("JPAVE-CLS rnd-ValueEmb", Variant.CLS, {"rand_value_emb": True}),
    ("JPAVE-CLS freeze-ValueEmb", Variant.CLS, {"freeze_value_emb": True}),
)
BASELINES: Tuple[Tuple[str, Variant, Dict[str, bool]], ...] = (
    ("JPAVE-GEN", Variant.GEN, {}),
    ("JPAVE-CLS", Variant.CLS, {}),
)


@dataclass
class RunManifest:
    """What a subcommand was asked to do, written next to its outputs."""

    subcommand: str
    argv: List[str]
    out_dir: Optional[str] = None
    config_path: Optional[str] = None
    dataset_paths: List[str] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    seed: Optional[int] = None
    version: str = __version__
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    def write(self) -> None:
        if self.out_dir is None:
            return
        self.finished = datetime.now(timezone.utc).isoformat()
        path = Path(self.out_dir) / MANIFEST_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n", encoding="utf-8")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def configure_logging() -> None:
    name = os.environ.get("JPAVE_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        warnings.warn(f"Unknown JPAVE_LOG level {name!r}, using WARNING")
        level = logging.WARNING
    root = logging.getLogger("jpave")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


def _flag(parser: argparse.ArgumentParser, name: str, text: str) -> None:
    parser.add_argument(name, action="store_const", const=True, default=None, help=text)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with TrainConfig fields")
    parser.add_argument("--variant", choices=[v.value for v in Variant])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--batch-size", type=int, dest="train_batch_size")
    parser.add_argument("--patience", type=int)
    parser.add_argument("--eval-every", type=int, help="validate every N epochs")
    parser.add_argument("--d-a", type=int, dest="d_a")
    parser.add_argument("--encoder-hidden", type=int)
    parser.add_argument("--l-max", type=int)
    parser.add_argument("--tokenize", choices=[m.value for m in TokenizeMode])
    _flag(parser, "--no-copy", "GEN: drop the copy mechanism")
    _flag(parser, "--no-apred", "GEN: train without the attribute predictor loss")
    _flag(parser, "--freeze-attr-emb", "keep attribute embeddings fixed")
    _flag(parser, "--rand-attr-emb", "random attribute embeddings")
    _flag(parser, "--freeze-value-emb", "CLS: keep value embeddings fixed")
    _flag(parser, "--rand-value-emb", "CLS: random value embeddings")
    _flag(parser, "--gate-values", "keep values only for attributes predicted to exist")
    _flag(parser, "--progress", "show progress bars")
    parser.add_argument("--embedding-file")
    parser.add_argument("--attr-embedding-file")
    parser.add_argument("--value-embedding-file")
    parser.add_argument("--threshold", type=float, help="CLS decision threshold")


_OVERRIDES = (
    "variant", "seed", "epochs", "learning_rate", "train_batch_size", "patience", "eval_every", "d_a", "encoder_hidden",
    "l_max", "tokenize", "no_copy", "no_apred", "freeze_attr_emb", "rand_attr_emb", "freeze_value_emb",
    "rand_value_emb", "gate_values", "progress", "embedding_file", "attr_embedding_file",
    "value_embedding_file", "threshold",
)


def resolve_config(args: argparse.Namespace) -> Tuple[TrainConfig, Optional[str]]:
    """Defaults, then ``--config`` (or the dataset's ``config.json``), then flags."""
    config_path = args.config
    data_dir = getattr(args, "data_dir", None)
    if config_path is None and data_dir and (Path(data_dir) / DATASET_CONFIG_FILE).is_file():
        config_path = str(Path(data_dir) / DATASET_CONFIG_FILE)
        logger.info("Using dataset defaults from %s", config_path)
    base = TrainConfig.from_json(config_path) if config_path else TrainConfig()
    config = base.replace(**{name: getattr(args, name, None) for name in _OVERRIDES})
    if config.variant is Variant.GEN and args.threshold is not None:
        warnings.warn("--threshold only affects the cls variant")
    return config, config_path


def _data_file(data_dir: Optional[str], name: str) -> Path:
    if data_dir is None:
        raise ConfigError(f"--data-dir is required to locate {name}")
    return Path(data_dir) / name


def _load_split(data_dir: Optional[str], name: str, config: TrainConfig, required: bool = True):
    path = _data_file(data_dir, name)
    if not path.is_file():
        if required:
            raise DataError(f"Dataset file {path} does not exist.")
        return []
    return load_jsonl(path, config.tokenize, config.l_max)


def _load_dataset_schema(data_dir: Optional[str], mode: TokenizeMode):
    path = _data_file(data_dir, SCHEMA_FILE)
    return load_schema(path, mode) if path.is_file() else None


def _summary(name: str, report) -> str:
    return (
        f"{name}: value P/R/F1 {report.value.precision:.4f}/{report.value.recall:.4f}/{report.value.f1:.4f}"
        f" attribute F1 {report.attribute.f1:.4f} JACC {report.jacc:.4f} IACC {report.iacc:.4f}"
        f" JF1 {report.jf1:.4f}"
    )


def cmd_synth(args: argparse.Namespace, manifest: RunManifest) -> int:
    base = SynthConfig()
    if args.config:
        try:
            json_data = json.loads(Path(args.config).read_text(encoding="utf-8"))
            base = SynthConfig(**json_data)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"Cannot read synth config {args.config}: {e}") from None
    overrides = {
        k: getattr(args, k)
        for k in ("seed", "n_train", "n_val", "n_test", "n_attributes", "values_per_attribute",
                  "heldout_fraction", "l_max")
        if getattr(args, k) is not None
    }
    config = dataclasses.replace(base, **overrides)
    train_set, val_set, test_set, schema = synth_generate(config)

    out = Path(args.out)
    mode = TokenizeMode.WHITESPACE
    for name, split in ((TRAIN_FILE, train_set), (VAL_FILE, val_set), (TEST_FILE, test_set)):
        save_jsonl(out / name, split, mode)
        manifest.outputs.append(name)
    save_schema(out / SCHEMA_FILE, schema)
    defaults = {"tokenize": mode.value, "l_max": config.l_max}
    (out / DATASET_CONFIG_FILE).write_text(json.dumps(defaults, indent=2) + "\n", encoding="utf-8")
    manifest.outputs += [SCHEMA_FILE, DATASET_CONFIG_FILE]
    manifest.seed = config.seed
    manifest.config_path = args.config
    print(f"Wrote {len(train_set)}/{len(val_set)}/{len(test_set)} instances and {schema} to {out}")
    return 0


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> int:
    config, manifest.config_path = resolve_config(args)
    train_set = _load_split(args.data_dir, TRAIN_FILE, config)
    val_set = _load_split(args.data_dir, VAL_FILE, config, required=False)
    schema = _load_dataset_schema(args.data_dir, config.tokenize)
    manifest.dataset_paths = [str(_data_file(args.data_dir, n)) for n in (TRAIN_FILE, VAL_FILE, SCHEMA_FILE)]
    manifest.seed = config.seed

    result = train(config, train_set, val_set, schema)
    out = Path(args.out)
    result.best.save(out / "best.ckpt")
    result.last.save(out / "last.ckpt")
    result.write_history(out / "history.json")
    manifest.outputs += ["best.ckpt", "last.ckpt", "history.json"]
    manifest.checkpoint_path = str(out / "best.ckpt")
    print(f"Trained {len(result.history)} epochs, best epoch {result.best.epoch}")
    return 0


def _load_model(args: argparse.Namespace):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model = Checkpoint.load(args.checkpoint).to_model()
    overrides = {"threshold": args.threshold, "gate_values": args.gate_values}
    if model.config.variant is Variant.GEN and args.threshold is not None:
        warnings.warn("--threshold only affects the cls variant")
    model.config = model.config.replace(**overrides)
    return model


def _unseen_pairs(data_dir: Optional[str], config: TrainConfig, test_set):
    if data_dir is None or not (Path(data_dir) / TRAIN_FILE).is_file():
        return None
    train_set = _load_split(data_dir, TRAIN_FILE, config)
    return zero_shot_split(train_set, test_set)[1]


def cmd_eval(args: argparse.Namespace, manifest: RunManifest) -> int:
    out = Path(args.out)
    if args.predictions:
        mode = TokenizeMode(args.tokenize or TokenizeMode.CHAR.value)
        gold_path = Path(args.gold or args.dataset or _data_file(args.data_dir, TEST_FILE))
        gold = load_jsonl(gold_path, mode, args.l_max or 10**9)
        report = evaluate(load_predictions(args.predictions, mode), gold)
        manifest.dataset_paths = [str(gold_path), args.predictions]
    else:
        model = _load_model(args)
        if args.traces and not isinstance(model, JpaveGen):
            raise ConfigError("--traces needs a gen checkpoint")
        manifest.checkpoint_path = args.checkpoint
        config = model.config
        test_path = Path(args.dataset or _data_file(args.data_dir, TEST_FILE))
        test_set = load_jsonl(test_path, config.tokenize, config.l_max)
        manifest.dataset_paths = [str(test_path)]
        unseen = _unseen_pairs(args.data_dir, config, test_set)
        predictions = predict_batches(model, test_set)
        report = evaluate(predictions, test_set, model.schema.attributes, unseen)
        save_predictions(out / "predictions.jsonl", predictions, model.schema.attributes)
        manifest.outputs.append("predictions.jsonl")
        if args.traces and isinstance(model, JpaveGen):
            model.write_traces(out / "traces.jsonl", test_set)
            manifest.outputs.append("traces.jsonl")

        if args.permute_seed is not None:
            permuted = permute_dataset(test_set, args.permute_seed, config.tokenize)
            permuted_report = evaluate_model(model, permuted, unseen)
            permuted_report.write_json(out / "report.permuted.json")
            manifest.outputs.append("report.permuted.json")
            print(_summary("permuted", permuted_report))

    report.write_json(out / "report.json")
    report.write_csv(out / "per_attribute.csv")
    manifest.outputs += ["report.json", "per_attribute.csv"]
    print(_summary("test", report))
    return 0


def cmd_permute(args: argparse.Namespace, manifest: RunManifest) -> int:
    mode = TokenizeMode(args.tokenize or TokenizeMode.CHAR.value)
    source = Path(args.dataset or _data_file(args.data_dir, TEST_FILE))
    instances = load_jsonl(source, mode, args.l_max or 10**9)
    target = Path(args.out) / f"{source.stem}.permuted.jsonl"
    save_jsonl(target, permute_dataset(instances, args.seed, mode), mode)
    manifest.dataset_paths = [str(source)]
    manifest.seed = args.seed
    manifest.outputs.append(target.name)
    print(f"Wrote {len(instances)} permuted instances to {target}")
    return 0


def cmd_zeroshot(args: argparse.Namespace, manifest: RunManifest) -> int:
    model = _load_model(args)
    config = model.config
    train_set = _load_split(args.data_dir, TRAIN_FILE, config)
    test_set = _load_split(args.data_dir, TEST_FILE, config)
    seen, unseen = zero_shot_split(train_set, test_set)
    report = evaluate_model(model, test_set, unseen)
    manifest.checkpoint_path = args.checkpoint
    manifest.dataset_paths = [str(_data_file(args.data_dir, n)) for n in (TRAIN_FILE, TEST_FILE)]

    out = Path(args.out)
    summary = {
        "n_seen_pairs": len(seen),
        "n_unseen_pairs": len(unseen),
        "seen": report.seen.to_json(),
        "unseen": report.unseen.to_json(),
        "per_attribute_unseen": {
            a: row.unseen.to_json() for a, row in report.per_attribute.items() if row.unseen is not None
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "zeroshot.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    report.write_csv(out / "zeroshot.csv")
    manifest.outputs += ["zeroshot.json", "zeroshot.csv"]
    print(
        f"seen F1 {report.seen.f1:.4f} unseen P/R/F1 "
        f"{report.unseen.precision:.4f}/{report.unseen.recall:.4f}/{report.unseen.f1:.4f}"
    )
    return 0


def cmd_gradcheck(args: argparse.Namespace, manifest: RunManifest) -> int:
    variant = Variant(args.variant)
    model, batch = toy_problem(variant, args.seed)
    error = grad_check(lambda params: joint_loss(batch, model), model.params, args.eps)
    manifest.seed = args.seed
    passed = error <= args.tolerance
    print(f"{variant.value}: max relative error {error:.3e} ({'ok' if passed else 'FAILED'})")
    return 0 if passed else 2


def ablation_slug(name: str) -> str:
    """Directory name of an ablation row, e.g. ``jpave-gen_wo_copy``."""
    return name.lower().replace(" ", "_").replace("/", "")


def run_ablation(
    base: TrainConfig,
    name: str,
    variant: Variant,
    flags: Dict[str, bool],
    train_set,
    val_set,
    test_set,
    schema,
    unseen,
) -> Tuple[dict, Checkpoint]:
    """Train and test one row of the ablation table."""
    overrides: Dict[str, Optional[object]] = {flag: False for flag in ABLATION_FLAGS}
    overrides.update(flags)
    # random init replaces any embedding file
    if overrides["rand_attr_emb"]:
        overrides["attr_embedding_file"] = None
    if overrides["rand_value_emb"]:
        overrides["value_embedding_file"] = None
    config = base.for_variant(variant, **overrides)
    result = train(config, train_set, val_set, schema)
    model = result.best.to_model()
    report = evaluate_model(model, test_set, unseen)
    row = {
        "name": name,
        "variant": variant.value,
        "attribute_precision": report.attribute.precision,
        "attribute_recall": report.attribute.recall,
        "attribute_f1": report.attribute.f1,
        "value_precision": report.value.precision,
        "value_recall": report.value.recall,
        "value_f1": report.value.f1,
        "jacc": report.jacc,
        "unseen_f1": report.unseen.f1 if report.unseen is not None else None,
        "best_epoch": result.best.epoch,
    }
    return row, result.best


def cmd_ablate(args: argparse.Namespace, manifest: RunManifest) -> int:
    config, manifest.config_path = resolve_config(args)
    train_set = _load_split(args.data_dir, TRAIN_FILE, config)
    val_set = _load_split(args.data_dir, VAL_FILE, config, required=False)
    test_set = _load_split(args.data_dir, TEST_FILE, config)
    schema = _load_dataset_schema(args.data_dir, config.tokenize)
    unseen = zero_shot_split(train_set, test_set)[1]
    manifest.seed = config.seed

    rows = []
    out = Path(args.out)
    variants = (BASELINES if args.with_baselines else ()) + ABLATIONS
    for name, variant, flags in variants:
        logger.info("Ablation %s", name)
        row, checkpoint = run_ablation(config, name, variant, flags, train_set, val_set, test_set, schema, unseen)
        checkpoint.save(out / ablation_slug(name) / "best.ckpt")
        rows.append(row)
        print(f"{name}: attribute F1 {row['attribute_f1']:.4f} value F1 {row['value_f1']:.4f}")

    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    with (out / "ablation.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    manifest.outputs += ["ablation.json", "ablation.csv"]
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jpave", description="Joint product attribute prediction and value extraction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--config", help="JSON file with SynthConfig fields")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--n-train", type=int)
    synth.add_argument("--n-val", type=int)
    synth.add_argument("--n-test", type=int)
    synth.add_argument("--n-attributes", type=int)
    synth.add_argument("--values-per-attribute", type=int)
    synth.add_argument("--heldout-fraction", type=float)
    synth.add_argument("--l-max", type=int)
    synth.set_defaults(func=cmd_synth)

    train_cmd = sub.add_parser("train", help="Train a model")
    train_cmd.add_argument("--data-dir", required=True)
    train_cmd.add_argument("--out", required=True)
    _add_model_flags(train_cmd)
    train_cmd.set_defaults(func=cmd_train)

    eval_cmd = sub.add_parser("eval", help="Score a checkpoint or a predictions file")
    eval_cmd.add_argument("--out", required=True)
    eval_cmd.add_argument("--checkpoint")
    eval_cmd.add_argument("--data-dir")
    eval_cmd.add_argument("--dataset", help="JSONL to evaluate on (default: <data-dir>/test.jsonl)")
    eval_cmd.add_argument("--predictions", help="score this predictions JSONL instead of a checkpoint")
    eval_cmd.add_argument("--gold", help="gold JSONL for --predictions")
    eval_cmd.add_argument("--tokenize", choices=[m.value for m in TokenizeMode])
    eval_cmd.add_argument("--l-max", type=int)
    eval_cmd.add_argument("--permute-seed", type=int, help="also score a permuted copy")
    eval_cmd.add_argument("--threshold", type=float)
    _flag(eval_cmd, "--gate-values", "keep values only for attributes predicted to exist")
    _flag(eval_cmd, "--traces", "gen: also write greedy decoding traces")
    eval_cmd.set_defaults(func=cmd_eval)

    permute = sub.add_parser("permute", help="Write a permuted copy of a test file")
    permute.add_argument("--out", required=True)
    permute.add_argument("--data-dir")
    permute.add_argument("--dataset")
    permute.add_argument("--seed", type=int, default=0)
    permute.add_argument("--tokenize", choices=[m.value for m in TokenizeMode])
    permute.add_argument("--l-max", type=int)
    permute.set_defaults(func=cmd_permute)

    zeroshot = sub.add_parser("zeroshot", help="Seen/unseen value report")
    zeroshot.add_argument("--out", required=True)
    zeroshot.add_argument("--checkpoint", required=True)
    zeroshot.add_argument("--data-dir", required=True)
    zeroshot.add_argument("--threshold", type=float)
    _flag(zeroshot, "--gate-values", "keep values only for attributes predicted to exist")
    zeroshot.set_defaults(func=cmd_zeroshot)

    gradcheck = sub.add_parser("gradcheck", help="Finite-difference check of the joint losses")
    gradcheck.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.GEN.value)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--eps", type=float, default=1e-5)
    gradcheck.add_argument("--tolerance", type=float, default=1e-4)
    gradcheck.add_argument("--out")
    gradcheck.set_defaults(func=cmd_gradcheck)

    ablate = sub.add_parser("ablate", help="Train and test the ablation variants")
    ablate.add_argument("--data-dir", required=True)
    ablate.add_argument("--out", required=True)
    _flag(ablate, "--with-baselines", "also run the two full models")
    _add_model_flags(ablate)
    ablate.set_defaults(func=cmd_ablate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        manifest = RunManifest(args.command, argv, out_dir=getattr(args, "out", None))
        status = args.func(args, manifest)
        manifest.write()
        return status
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ContractError as e:
        logger.exception("Internal failure")
        print(f"internal error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
