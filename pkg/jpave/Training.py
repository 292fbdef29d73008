"""Joint objectives, optimizer, training loop and checkpoints."""
import dataclasses
import json
import logging
import math
import numbers
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from tqdm import tqdm

from .AbstractJpave import AbstractJpave
from .Classes import Prediction
from .Classes import ProductInstance
from .Classes import Schema
from .Constants import ADAM_BETA1
from .Constants import ADAM_BETA2
from .Constants import ADAM_EPS
from .Constants import CLIP_NORM
from .Constants import D_A
from .Constants import ENCODER_HIDDEN
from .Constants import FORMAT_VERSION
from .Constants import INIT_RANGE
from .Constants import L_MAX
from .Constants import LEARNING_RATE
from .Constants import PATIENCE
from .Constants import T_MAX
from .Constants import TEST_BATCH_SIZE
from .Constants import THRESHOLD
from .Constants import TRAIN_BATCH_SIZE
from .Constants import VAL_BATCH_SIZE
from .Data import Vocab
from .Data import build_vocab
from .Data import check_dataset
from .Data import gold_pairs
from .Data import normalize_schema
from .Enums import TokenizeMode
from .Enums import Variant
from .Exceptions import CheckpointError
from .Exceptions import ConfigError
from .Exceptions import DataError
from .Exceptions import TrainingDivergedError
from .JpaveCls import JpaveCls
from .JpaveGen import JpaveGen
from .Metrics import EvalReport
from .Metrics import evaluate
from .Numkit import DenseTensor
from .Numkit import ModelParams
from .Numkit import add
from .Numkit import add_all
from .Storage import read_container
from .Storage import write_container

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GEN_ONLY_FLAGS = ("no_copy", "no_apred")
CLS_ONLY_FLAGS = ("freeze_value_emb", "rand_value_emb", "value_embedding_file")


@dataclass
class TrainConfig:
    """Everything a training run depends on.

    Defaults reproduce the published setting. Values are resolved as
    built-in defaults, then a ``--config`` JSON file, then explicit flags.

    Raises:
        ConfigError: On non-positive sizes, ``d_a != 2 * encoder_hidden``,
            conflicting flags, or flags that do not apply to the variant.
    """

    variant: Variant = Variant.GEN
    l_max: int = L_MAX
    d_a: int = D_A
    encoder_hidden: int = ENCODER_HIDDEN
    t_max: int = T_MAX
    train_batch_size: int = TRAIN_BATCH_SIZE
    val_batch_size: int = VAL_BATCH_SIZE
    test_batch_size: int = TEST_BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    epochs: int = 50
    seed: int = 0
    no_copy: bool = False
    no_apred: bool = False
    freeze_attr_emb: bool = False
    rand_attr_emb: bool = False
    freeze_value_emb: bool = False
    rand_value_emb: bool = False
    gate_values: bool = False
    tokenize: TokenizeMode = TokenizeMode.CHAR
    min_freq: int = 1
    patience: int = PATIENCE
    eval_every: int = 1
    clip_norm: float = CLIP_NORM
    init_range: float = INIT_RANGE
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    threshold: float = THRESHOLD
    embedding_file: Optional[str] = None
    attr_embedding_file: Optional[str] = None
    value_embedding_file: Optional[str] = None
    progress: bool = False

    def __post_init__(self) -> None:
        try:
            self.variant = Variant(self.variant)
            self.tokenize = TokenizeMode(self.tokenize)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        self._check_types()

        for name in ("l_max", "d_a", "encoder_hidden", "t_max", "train_batch_size", "val_batch_size",
                     "test_batch_size", "min_freq", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_a != 2 * self.encoder_hidden:
            raise ConfigError(f"d_a ({self.d_a}) must equal 2 * encoder_hidden ({self.encoder_hidden})")
        if self.epochs < 0 or self.patience < 0:
            raise ConfigError("epochs and patience must be non-negative.")
        if self.learning_rate < 0 or self.clip_norm <= 0 or self.init_range <= 0:
            raise ConfigError("learning_rate must be >= 0, clip_norm and init_range > 0.")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive.")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.rand_attr_emb and self.attr_embedding_file:
            raise ConfigError("rand_attr_emb conflicts with attr_embedding_file.")
        if self.rand_value_emb and self.value_embedding_file:
            raise ConfigError("rand_value_emb conflicts with value_embedding_file.")

        wrong = GEN_ONLY_FLAGS if self.variant is Variant.CLS else CLS_ONLY_FLAGS
        used = [name for name in wrong if getattr(self, name)]
        if used:
            raise ConfigError(
                f"{', '.join(used)} cannot be used with the {self.variant.value} variant.",
                context={"variant": self.variant.value, "flags": used},
            )

    def _check_types(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type is bool:
                ok = isinstance(value, (bool, np.bool_))
                cast = bool
            elif f.type is int:
                ok = isinstance(value, numbers.Integral) and not isinstance(value, (bool, np.bool_))
                cast = int
            elif f.type is float:
                ok = isinstance(value, numbers.Real) and not isinstance(value, (bool, np.bool_))
                cast = float
            elif f.type == Optional[str]:
                ok = value is None or isinstance(value, str)
                cast = None
            else:
                continue
            if not ok:
                raise ConfigError(
                    f"{f.name} must be of type {getattr(f.type, '__name__', 'str or null')}, got {value!r}",
                    context={"field": f.name},
                )
            if cast is not None:
                setattr(self, f.name, cast(value))

    def to_json(self) -> dict:
        json_data = dataclasses.asdict(self)
        json_data["variant"] = self.variant.value
        json_data["tokenize"] = self.tokenize.value
        return json_data

    @classmethod
    def from_dict(cls, json_data: dict) -> "TrainConfig":
        if not isinstance(json_data, dict):
            raise ConfigError(f"Expected a mapping of config fields, got {type(json_data).__name__}.")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(json_data) - known)
        if unknown:
            raise ConfigError(f"Unknown config fields: {', '.join(unknown)}")
        return cls(**json_data)

    @classmethod
    def from_json(cls, path: PathLike) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file {path} does not exist.")
        try:
            json_data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
        if not isinstance(json_data, dict):
            raise ConfigError(f"{path}: expected a JSON object.")
        return cls.from_dict(json_data)

    def replace(self, **overrides) -> "TrainConfig":
        """A copy with every override that is not ``None`` applied."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return self.from_dict({**self.to_json(), **changes})

    def for_variant(self, variant: Variant, **overrides) -> "TrainConfig":
        """A copy switched to ``variant`` with the other variant's fields cleared."""
        variant = Variant(variant)
        settings = self.to_json()
        for name in GEN_ONLY_FLAGS if variant is Variant.CLS else CLS_ONLY_FLAGS:
            settings[name] = None if name.endswith("_file") else False
        settings.update(overrides, variant=variant.value)
        return self.from_dict(settings)


class Adam:
    """Adaptive-moment optimizer over the unfrozen parameters of a registry."""

    def __init__(self, params: ModelParams, config: TrainConfig) -> None:
        self.params = params
        self.lr = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.frozen:
                continue
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * p.grad
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"adam.m/{k}", v) for k, v in self.m.items()] + [
            (f"adam.v/{k}", v) for k, v in self.v.items()
        ]

    def load_state(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            if f"adam.m/{name}" in arrays:
                self.m[name] = arrays[f"adam.m/{name}"].copy()
                self.v[name] = arrays[f"adam.v/{name}"].copy()
        self.t = t


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale unfrozen gradients to a global norm of at most ``max_norm``.

    Returns:
        float: The norm before clipping.
    """
    trainable = [p for p in params if not p.frozen]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in trainable))
    if norm > max_norm:
        scale = max_norm / norm
        for p in trainable:
            p.grad *= scale
    return norm


def build_model(
    config: TrainConfig, vocab: Vocab, schema: Schema, params: Optional[ModelParams] = None
) -> AbstractJpave:
    model_cls = JpaveGen if config.variant is Variant.GEN else JpaveCls
    return model_cls(config, vocab, schema, params)


def _joint_loss(
    batch: Sequence[ProductInstance], model: AbstractJpave, epoch: int, step: int
) -> DenseTensor:
    terms = []
    for instance in batch:
        attr_loss, value_loss = model.instance_losses(instance)
        loss = value_loss if model.config.no_apred else add(attr_loss, value_loss)
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError(
                f"Non-finite loss on instance {instance.id} (epoch {epoch}, step {step})",
                epoch=epoch,
                step=step,
                instance_id=instance.id,
            )
        terms.append(loss)
    return add_all(terms)


def joint_loss_gen(
    batch: Sequence[ProductInstance], model: AbstractJpave, epoch: int = 0, step: int = 0
) -> DenseTensor:
    """``L^attr + L^value_G`` summed over the batch; ``L^value_G`` alone with ``no_apred``."""
    if model.config.variant is not Variant.GEN:
        raise ConfigError("joint_loss_gen needs a generation model.")
    return _joint_loss(batch, model, epoch, step)


def joint_loss_cls(
    batch: Sequence[ProductInstance], model: AbstractJpave, epoch: int = 0, step: int = 0
) -> DenseTensor:
    """``L^attr + L^value_C`` summed over the batch."""
    if model.config.variant is not Variant.CLS:
        raise ConfigError("joint_loss_cls needs a classification model.")
    return _joint_loss(batch, model, epoch, step)


def joint_loss(
    batch: Sequence[ProductInstance], model: AbstractJpave, epoch: int = 0, step: int = 0
) -> DenseTensor:
    if model.config.variant is Variant.GEN:
        return joint_loss_gen(batch, model, epoch, step)
    return joint_loss_cls(batch, model, epoch, step)


@dataclass
class Checkpoint:
    """A model's complete state: config, vocabulary, schema and tensors.

    Reloading reproduces the same forward passes bit for bit.
    """

    config: TrainConfig
    vocab: Vocab
    schema: Schema
    params: Dict[str, np.ndarray]
    frozen: List[str] = field(default_factory=list)
    epoch: int = 0
    rng_state: Optional[dict] = None
    optimizer_step: int = 0
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __repr__(self) -> str:
        return f"Checkpoint(variant={self.config.variant.value}, epoch={self.epoch})"

    @classmethod
    def from_model(
        cls,
        model: AbstractJpave,
        epoch: int = 0,
        rng: Optional[np.random.Generator] = None,
        optimizer: Optional[Adam] = None,
    ) -> "Checkpoint":
        return cls(
            config=model.config,
            vocab=model.vocab,
            schema=model.schema,
            params=model.params.snapshot(),
            frozen=[p.name for p in model.params if p.frozen],
            epoch=epoch,
            rng_state=rng.bit_generator.state if rng is not None else None,
            optimizer_step=optimizer.t if optimizer is not None else 0,
            optimizer={k: v.copy() for k, v in optimizer.state()} if optimizer is not None else {},
        )

    def to_model(self) -> AbstractJpave:
        params = ModelParams()
        for name, value in self.params.items():
            params.add(name, value, frozen=name in self.frozen)
        layout = dataclasses.replace(
            self.config, embedding_file=None, attr_embedding_file=None, value_embedding_file=None
        )
        expected = build_model(layout, self.vocab, self.schema).params
        if sorted(expected.names()) != sorted(params.names()) or any(
            expected[p.name].shape != p.shape for p in params
        ):
            raise CheckpointError("Checkpoint tensors do not match the model layout.")
        return build_model(self.config, self.vocab, self.schema, params)

    def save(self, path: PathLike) -> None:
        header = {
            "kind": "checkpoint",
            "format_version": self.format_version,
            "config": self.config.to_json(),
            "vocab": self.vocab.to_json(),
            "schema": self.schema.to_json(),
            "frozen": list(self.frozen),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "optimizer_step": self.optimizer_step,
        }
        arrays = [(f"param/{k}", v) for k, v in self.params.items()]
        arrays += sorted(self.optimizer.items())
        write_container(path, header, arrays)

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        header, arrays = read_container(path)
        if header.get("kind") != "checkpoint":
            raise CheckpointError(f"{path} is not a checkpoint.")
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {header.get('format_version')} is not supported "
                f"(expected {FORMAT_VERSION})."
            )
        try:
            config = TrainConfig.from_dict(header["config"])
            vocab = Vocab.from_json(header["vocab"])
            schema = Schema.from_json(header["schema"])
            frozen = [str(name) for name in header.get("frozen", [])]
            epoch = int(header.get("epoch", 0))
            optimizer_step = int(header.get("optimizer_step", 0))
        except (ConfigError, DataError, KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: invalid checkpoint header ({e})") from None
        return cls(
            config=config,
            vocab=vocab,
            schema=schema,
            params={k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")},
            frozen=frozen,
            epoch=epoch,
            rng_state=header.get("rng_state"),
            optimizer_step=optimizer_step,
            optimizer={k: v for k, v in arrays.items() if k.startswith("adam.")},
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    report: Optional[EvalReport] = None

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "validation": self.report.to_json() if self.report is not None else None,
        }


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: List[EpochRecord] = field(default_factory=list)

    def write_history(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([r.to_json() for r in self.history], indent=2) + "\n", encoding="utf-8")


def predict_batches(
    model: AbstractJpave, instances: Sequence[ProductInstance], batch_size: Optional[int] = None
) -> List[Prediction]:
    """Predict ``instances`` in chunks of ``batch_size`` (default ``test_batch_size``)."""
    size = batch_size or model.config.test_batch_size
    chunks = range(0, len(instances), size)
    predictions: List[Prediction] = []
    for start in tqdm(chunks, desc="predict", leave=False, disable=not model.config.progress):
        predictions.extend(model.predict_dataset(instances[start : start + size]))
    return predictions


def evaluate_model(
    model: AbstractJpave,
    instances: Sequence[ProductInstance],
    unseen=None,
    batch_size: Optional[int] = None,
) -> EvalReport:
    predictions = predict_batches(model, instances, batch_size)
    return evaluate(predictions, instances, model.schema.attributes, unseen)


def _batches(
    instances: Sequence[ProductInstance], size: int, rng: np.random.Generator
) -> List[List[ProductInstance]]:
    order = rng.permutation(len(instances))
    return [[instances[int(i)] for i in order[k : k + size]] for k in range(0, len(order), size)]


def train(
    config: TrainConfig,
    train_set: Sequence[ProductInstance],
    val_set: Sequence[ProductInstance] = (),
    schema: Optional[Schema] = None,
    vocab: Optional[Vocab] = None,
) -> TrainResult:
    """Train a model from ``config.seed``.

    The classification variant only gets output units for values that occur
    in ``train_set``. With a validation set, validation runs every
    ``eval_every`` epochs and on the last one; the best validated epoch by
    value F1 is kept and training stops after ``patience`` validations
    without improvement (``patience=0`` never stops early). Without one the
    last epoch is best.

    Raises:
        DataError: If the training set is empty or inconsistent with the schema.
        TrainingDivergedError: If a loss becomes non-finite.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise DataError("The training set is empty.")
    schema = normalize_schema(schema, config.tokenize) if schema is not None else Schema.from_instances(train_set)
    check_dataset(train_set + val_set, schema, config.l_max)
    if vocab is None:
        vocab = build_vocab(train_set, config.min_freq, schema, config.tokenize)
    if config.variant is Variant.CLS:
        schema = schema.restricted_to(gold_pairs(train_set))

    model = build_model(config, vocab, schema)
    optimizer = Adam(model.params, config)
    rng = np.random.default_rng((config.seed, 1))
    logger.info("Training %r for up to %d epochs", model, config.epochs)

    history: List[EpochRecord] = []
    best = Checkpoint.from_model(model, 0, rng, optimizer)
    best_score = -1.0
    stale = 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        batches = _batches(train_set, config.train_batch_size, rng)
        for step, batch in enumerate(
            tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not config.progress), 1
        ):
            model.params.zero_grad()
            loss = joint_loss(batch, model, epoch, step)
            loss.backward()
            clip_gradients(model.params, config.clip_norm)
            optimizer.step()
            epoch_loss += loss.item()

        validate = bool(val_set) and (epoch % config.eval_every == 0 or epoch == config.epochs)
        report = evaluate_model(model, val_set, batch_size=config.val_batch_size) if validate else None
        history.append(EpochRecord(epoch, epoch_loss, report))
        if report is None:
            logger.info("epoch %d loss %.4f", epoch, epoch_loss)
            if not val_set:
                best = Checkpoint.from_model(model, epoch, rng, optimizer)
            continue

        logger.info(
            "epoch %d loss %.4f val value F1 %.4f attribute F1 %.4f",
            epoch,
            epoch_loss,
            report.value.f1,
            report.attribute.f1,
        )
        if report.value.f1 > best_score:
            best_score, stale = report.value.f1, 0
            best = Checkpoint.from_model(model, epoch, rng, optimizer)
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                logger.warning(
                    "Early stopping at epoch %d, best val value F1 %.4f at epoch %d",
                    epoch,
                    best_score,
                    best.epoch,
                )
                break

    return TrainResult(best, Checkpoint.from_model(model, epoch, rng, optimizer), history)


def toy_problem(variant: Variant, seed: int = 0) -> Tuple[AbstractJpave, List[ProductInstance]]:
    """A tiny model and a two-instance batch for gradient checks.

    |V| = 20, d_a = 8 (4 per direction), L = 6, three attributes and six values.
    """
    schema = Schema.from_json(
        {
            "attributes": ["color", "material", "style"],
            "values": [
                {"attribute": "color", "value": "red"},
                {"attribute": "color", "value": "blue"},
                {"attribute": "material", "value": "silk"},
                {"attribute": "material", "value": "wool"},
                {"attribute": "style", "value": "slim"},
                {"attribute": "style", "value": "loose"},
            ],
        }
    )
    batch = [
        ProductInstance(
            "toy-1", tuple("red silk dress for summer sale".split()), {"color": ["red"], "material": ["silk"]}
        ),
        ProductInstance(
            "toy-2",
            tuple("loose blue wool shirt for men".split()),
            {"color": ["blue"], "material": ["wool"], "style": ["loose"]},
        ),
    ]
    config = TrainConfig(
        variant=variant, l_max=6, d_a=8, encoder_hidden=4, tokenize=TokenizeMode.WHITESPACE, seed=seed
    )
    vocab = build_vocab(batch, schema=schema, mode=config.tokenize)
    return build_model(config, vocab, schema), batch
