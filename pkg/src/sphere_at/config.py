"""Flat experiment configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored; keys are dotted names from :data:`SCHEMA`; a key may
appear once. Booleans are ``true``/``false``, tuples are comma separated and
``none`` clears an optional value. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .attacks import AttackSpec
from .datahub import Dataset, load_idx_images, make_two_moons, mnist_subset
from .diffcore import ContractError
from .objectives import ObjectiveSpec
from .rng import split_rng
from .spherehead import ArchitectureSpec, HeadConfig
from .trainer import TrainSpec


class ConfigError(ContractError):
    def __init__(self, msg: str, key: str | None = None, line: int | None = None):
        where = "" if line is None else f"line {line}: "
        super().__init__(f"{where}{msg}")
        self.key = key
        self.line = line


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _opt(conv):
    def parse(s):
        return None if s.lower() == "none" else conv(s)
    return parse


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "runs/run"),
    "dataset": (str, "two-moons"),
    "data.n_train": (int, 1000),
    "data.n_test": (int, 500),
    "data.noise": (float, 0.1),
    "data.train_images": (_opt(str), None),
    "data.train_labels": (_opt(str), None),
    "data.test_images": (_opt(str), None),
    "data.test_labels": (_opt(str), None),
    "arch.kind": (str, "mlp"),
    "arch.hidden": (_ints, (64, 64)),
    "arch.feature_dim": (int, 32),
    "arch.activation": (str, "relu"),
    "arch.kernel": (int, 5),
    "arch.activate_features": (_bool, False),
    "framework": (str, "pgd-at"),
    "epochs": (int, 10),
    "batch_size": (int, 128),
    "lr": (float, 0.1),
    "momentum": (float, 0.9),
    "weight_decay": (float, 5e-4),
    "lr_decay_epochs": (_floats, (0.75, 0.9)),
    "free_replays": (int, 4),
    "alpha": (float, 0.5),
    "lam": (_opt(float), None),
    "head.mode": (str, "standard"),
    "head.s": (float, 15.0),
    "head.m": (_opt(float), None),
    "attack.norm": (str, "inf"),
    "attack.eps": (float, 0.08),
    "attack.step": (float, 0.02),
    "attack.steps": (int, 10),
    "attack.rand_init": (_bool, True),
    "attack.restarts": (int, 1),
    "eval.attack": (str, "pgd"),
    "eval.eps": (_opt(float), None),
    "eval.step": (_opt(float), None),
    "eval.steps": (int, 20),
    "eval.size": (_opt(int), None),
    "checkpoint_every": (int, 0),
    "record_wall_time": (_bool, False),
}
DATASETS = ("two-moons", "mnist-subset", "idx")


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        raw: dict = {}
        lines: dict = {}
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or not key:
                raise ConfigError(f"expected 'key = value', got {line!r}", line=no)
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}", key=key, line=no)
            if key in raw:
                raise ConfigError(f"duplicate key {key!r}", key=key, line=no)
            raw[key], lines[key] = val, no
        for key, val in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}", key=key)
            raw[key] = str(val)
        values = {}
        for key, (conv, default) in SCHEMA.items():
            if key not in raw:
                values[key] = default
                continue
            try:
                values[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}", key=key, line=lines.get(key)) from None
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(), overrides)

    def to_text(self, version: str | None = None) -> str:
        head = [f"# {version}"] if version else []
        return "\n".join(head + [f"{k} = {format_value(v)}" for k, v in self.values.items()]) + "\n"

    def validate(self) -> None:
        """Build every spec once so invalid combinations surface as ConfigError."""
        if self["dataset"] not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}", key="dataset")
        if self["dataset"] == "idx":
            for k in ("data.train_images", "data.train_labels", "data.test_images", "data.test_labels"):
                if self[k] is None:
                    raise ConfigError(f"{k} is required for dataset=idx", key=k)
        if self["eval.attack"] not in ("none", "pgd"):
            raise ConfigError("eval.attack must be 'none' or 'pgd'", key="eval.attack")
        if self["checkpoint_every"] < 0:
            raise ConfigError("checkpoint_every must be >= 0", key="checkpoint_every")
        try:
            self.train_spec(self._shape_stub())
        except ConfigError:
            raise
        except (ContractError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def _shape_stub(self):
        if self["dataset"] == "two-moons":
            return (2,), 2
        return (1, 28, 28), 10

    # -- spec builders --------------------------------------------------------------

    def head(self) -> HeadConfig:
        return HeadConfig(self["head.mode"], self["head.s"], self["head.m"])

    def arch(self, input_shape, num_classes) -> ArchitectureSpec:
        return ArchitectureSpec(input_shape=input_shape, hidden=self["arch.hidden"],
                                feature_dim=self["arch.feature_dim"], num_classes=num_classes,
                                kind=self["arch.kind"], activation=self["arch.activation"],
                                kernel=self["arch.kernel"], activate_features=self["arch.activate_features"])

    def attack(self) -> AttackSpec:
        return AttackSpec(norm=self["attack.norm"], eps=self["attack.eps"], step=self["attack.step"],
                          steps=self["attack.steps"], rand_init=self["attack.rand_init"],
                          restarts=self["attack.restarts"])

    def eval_attack(self) -> AttackSpec | None:
        if self["eval.attack"] == "none":
            return None
        eps = self["attack.eps"] if self["eval.eps"] is None else self["eval.eps"]
        step = self["attack.step"] if self["eval.step"] is None else self["eval.step"]
        return AttackSpec(norm=self["attack.norm"], eps=eps, step=step, steps=self["eval.steps"],
                          rand_init=True, objective=ObjectiveSpec("ce-vs-label", self.head()))

    def train_spec(self, shape_and_classes) -> TrainSpec:
        input_shape, num_classes = shape_and_classes
        return TrainSpec(arch=self.arch(input_shape, num_classes), framework=self["framework"],
                         head=self.head(), attack=self.attack(), eval_attack=self.eval_attack(),
                         epochs=self["epochs"], batch_size=self["batch_size"], lr=self["lr"],
                         momentum=self["momentum"], weight_decay=self["weight_decay"],
                         lr_decay_epochs=self["lr_decay_epochs"], free_replays=self["free_replays"],
                         alpha=self["alpha"], lam=self["lam"], seed=self["seed"],
                         eval_size=self["eval.size"], record_wall_time=self["record_wall_time"])

    def data_keys(self) -> dict:
        return {k: v for k, v in self.values.items() if k == "dataset" or k.startswith("data.") or k == "seed"}


def load_data(values: dict):
    """(train, test) datasets for the ``dataset`` / ``data.*`` keys of a config."""
    kind = values["dataset"]
    seed = int(values["seed"])
    if kind == "two-moons":
        noise = float(values["data.noise"])
        tr_seed = int(split_rng(seed, "data/train").integers(2**31))
        te_seed = int(split_rng(seed, "data/test").integers(2**31))
        return (make_two_moons(int(values["data.n_train"]), noise, tr_seed, "train"),
                make_two_moons(int(values["data.n_test"]), noise, te_seed, "test"))
    if kind == "mnist-subset":
        return mnist_subset(n_test=int(values["data.n_test"]), seed=0)
    if kind == "idx":
        return (load_idx_images(values["data.train_images"], values["data.train_labels"], "idx", "train"),
                load_idx_images(values["data.test_images"], values["data.test_labels"], "idx", "test"))
    raise ConfigError(f"unknown dataset {kind!r}", key="dataset")


def data_shape(train: Dataset, test: Dataset):
    return tuple(train.inputs.shape[1:]), int(max(train.labels.max(), test.labels.max())) + 1
