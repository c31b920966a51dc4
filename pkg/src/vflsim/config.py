"""Experiment configs: flat INI with [algorithm] [compressor] [data] [output].

Unknown keys are hard errors so that typos cannot silently fall back to
defaults.  Values may be quoted; quotes are stripped.  `batch_size = full`
and `epochs` are resolved against the dataset size when the model is built,
which is why ExperimentConfig stores scalars rather than a finished
AlgorithmSpec.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

from .compressors import CompressorSpec, InvalidCompressorSpec
from .protocol import PRIVATE_KINDS, PUBLIC_KINDS, AlgorithmSpec, ConfigError

_ALGORITHM_KEYS = {"kind", "eta", "epochs", "rounds", "batch_size", "local_updates",
                   "weight_decay", "eta_halve_epochs", "compress_x0",
                   "downlink_scheme", "seeds"}
_COMPRESSOR_KEYS = {"compressor"}
_DATA_KEYS_COMMON = {"dataset", "data_seed"}
_DATA_KEYS_QUADRATIC = {"n_samples", "n_clients", "param_dims", "rep_dim"}
_DATA_KEYS_MNIST = {"path", "hidden_dim", "train_size", "val_size"}
_OUTPUT_KEYS = {"dir", "save_trace", "save_summary", "diagnostics"}

DATASETS = ("quadratic", "mnist")


@dataclass
class ExperimentConfig:
    kind: str
    eta: float
    batch_size: object  # int or "full"
    epochs: int = None
    rounds: int = None
    local_updates: int = 1
    weight_decay: float = 0.0
    eta_halve_epochs: tuple = ()
    compress_x0: bool = False
    downlink_scheme: int = None
    seeds: tuple = (0, 1, 2, 3, 4)
    compressor: CompressorSpec = field(default_factory=lambda: CompressorSpec("identity"))
    dataset: str = "quadratic"
    data_seed: int = 0
    n_samples: int = 512
    n_clients: int = 4
    param_dims: object = 6  # int or tuple
    rep_dim: int = 4
    mnist_path: str = "data/mnist"
    hidden_dim: int = 128
    train_size: int = None
    val_size: int = 6000
    out_dir: str = "runs"
    save_trace: bool = True
    save_summary: bool = True
    diagnostics: bool = False

    def resolve_rounds(self, n_samples: int) -> int:
        batch = n_samples if self.batch_size == "full" else self.batch_size
        if self.rounds is not None:
            return self.rounds
        per_epoch = max(1, math.ceil(n_samples / (batch * self.local_updates)))
        return self.epochs * per_epoch

    def build_algorithm(self, n_samples: int) -> AlgorithmSpec:
        batch = n_samples if self.batch_size == "full" else self.batch_size
        if batch > n_samples:
            raise ConfigError(f"batch_size {batch} exceeds dataset size {n_samples}")
        return AlgorithmSpec(
            kind=self.kind,
            eta=self.eta,
            rounds=self.resolve_rounds(n_samples),
            batch_size=batch,
            local_updates=self.local_updates,
            weight_decay=self.weight_decay,
            eta_halve_epochs=self.eta_halve_epochs,
            compress_x0=self.compress_x0,
            downlink_scheme=self.downlink_scheme,
        )


def _strip(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        value = value[1:-1]
    return value


def _typed(section, key, raw, kind):
    raw = _strip(raw)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"TypeError: [{section}] {key} = {raw!r} is not a {kind.__name__}") from None


def _int_list(section, key, raw):
    raw = _strip(raw)
    if not raw:
        return ()
    return tuple(_typed(section, key, part, int) for part in raw.split(","))


def _check_keys(parser, section, allowed):
    if not parser.has_section(section):
        raise ConfigError(f"MissingRequired: section [{section}]")
    for key in parser[section]:
        if key not in allowed:
            raise ConfigError(f"UnknownKey: {key!r} in [{section}]")


def _require(parser, section, key):
    if key not in parser[section]:
        raise ConfigError(f"MissingRequired: [{section}] {key}")
    return parser[section][key]


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    for section in parser.sections():
        if section not in ("algorithm", "compressor", "data", "output"):
            raise ConfigError(f"UnknownKey: section [{section}]")

    _check_keys(parser, "algorithm", _ALGORITHM_KEYS)
    _check_keys(parser, "compressor", _COMPRESSOR_KEYS)
    _check_keys(parser, "data", _DATA_KEYS_COMMON | _DATA_KEYS_QUADRATIC | _DATA_KEYS_MNIST)
    if parser.has_section("output"):
        _check_keys(parser, "output", _OUTPUT_KEYS)

    alg = parser["algorithm"]
    kind = _strip(_require(parser, "algorithm", "kind"))
    if kind not in PUBLIC_KINDS + PRIVATE_KINDS:
        raise ConfigError(f"TypeError: unknown algorithm kind {kind!r}")
    if ("epochs" in alg) == ("rounds" in alg):
        raise ConfigError("MissingRequired: [algorithm] exactly one of epochs or rounds")

    raw_batch = _strip(_require(parser, "algorithm", "batch_size"))
    batch_size = "full" if raw_batch == "full" else _typed("algorithm", "batch_size", raw_batch, int)

    try:
        compressor = CompressorSpec.parse(_strip(_require(parser, "compressor", "compressor")))
    except InvalidCompressorSpec as exc:
        raise ConfigError(f"TypeError: {exc}") from None

    data = parser["data"]
    dataset = _strip(_require(parser, "data", "dataset"))
    if dataset not in DATASETS:
        raise ConfigError(f"TypeError: unknown dataset {dataset!r}")
    wrong = (_DATA_KEYS_MNIST if dataset == "quadratic" else _DATA_KEYS_QUADRATIC)
    for key in data:
        if key in wrong:
            raise ConfigError(f"UnknownKey: {key!r} in [data] for dataset {dataset}")

    cfg = ExperimentConfig(
        kind=kind,
        eta=_typed("algorithm", "eta", _require(parser, "algorithm", "eta"), float),
        batch_size=batch_size,
        epochs=_typed("algorithm", "epochs", alg["epochs"], int) if "epochs" in alg else None,
        rounds=_typed("algorithm", "rounds", alg["rounds"], int) if "rounds" in alg else None,
        local_updates=_typed("algorithm", "local_updates", alg.get("local_updates", "1"), int),
        weight_decay=_typed("algorithm", "weight_decay", alg.get("weight_decay", "0"), float),
        eta_halve_epochs=_int_list("algorithm", "eta_halve_epochs",
                                   alg.get("eta_halve_epochs", "")),
        compress_x0=_typed("algorithm", "compress_x0", alg.get("compress_x0", "false"), bool),
        downlink_scheme=(_typed("algorithm", "downlink_scheme", alg["downlink_scheme"], int)
                         if "downlink_scheme" in alg else None),
        seeds=_int_list("algorithm", "seeds", alg.get("seeds", "0,1,2,3,4")),
        compressor=compressor,
        dataset=dataset,
        data_seed=_typed("data", "data_seed", data.get("data_seed", "0"), int),
    )
    if not cfg.seeds:
        raise ConfigError("MissingRequired: [algorithm] seeds must be non-empty")

    if dataset == "quadratic":
        cfg.n_samples = _typed("data", "n_samples", data.get("n_samples", "512"), int)
        cfg.n_clients = _typed("data", "n_clients", data.get("n_clients", "4"), int)
        dims = _int_list("data", "param_dims", data.get("param_dims", "6"))
        cfg.param_dims = dims[0] if len(dims) == 1 else dims
        cfg.rep_dim = _typed("data", "rep_dim", data.get("rep_dim", "4"), int)
    else:
        cfg.mnist_path = _strip(data.get("path", "data/mnist"))
        cfg.hidden_dim = _typed("data", "hidden_dim", data.get("hidden_dim", "128"), int)
        if "train_size" in data:
            cfg.train_size = _typed("data", "train_size", data["train_size"], int)
        cfg.val_size = _typed("data", "val_size", data.get("val_size", "6000"), int)

    if parser.has_section("output"):
        out = parser["output"]
        cfg.out_dir = _strip(out.get("dir", "runs"))
        cfg.save_trace = _typed("output", "save_trace", out.get("save_trace", "true"), bool)
        cfg.save_summary = _typed("output", "save_summary", out.get("save_summary", "true"), bool)
        cfg.diagnostics = _typed("output", "diagnostics", out.get("diagnostics", "false"), bool)

    # fail fast on combinations AlgorithmSpec would reject, with a token size
    # standing in for "full" (the real batch is resolved at model-build time)
    AlgorithmSpec(kind=cfg.kind, eta=cfg.eta, rounds=0,
                  batch_size=10 ** 9 if cfg.batch_size == "full" else cfg.batch_size,
                  local_updates=cfg.local_updates, weight_decay=cfg.weight_decay,
                  eta_halve_epochs=cfg.eta_halve_epochs, compress_x0=cfg.compress_x0,
                  downlink_scheme=cfg.downlink_scheme)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
