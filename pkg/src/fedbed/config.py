"""Experiment configuration: parsing, validation, placeholder substitution.

The config is a YAML tree. The ``code``, ``devices`` and ``monitoring``
sections follow the experimenter-facing convention (entrypoints with
``${COLEXT_*}`` placeholders in their args, a device roster of
``{dev_type, count}`` entries, and scrape/push intervals); the remaining
sections configure the built-in workload. Unknown keys are rejected with
the offending dotted path so typos fail loudly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from fedbed.data import PartitionPlan
from fedbed.emulator import DeviceProfile, get_profile, load_profiles
from fedbed.model import ModelSpec, TrainConfig
from fedbed.strategy import StrategyConfig

ENV_SERVER_ADDRESS = "COLEXT_SERVER_ADDRESS"
ENV_N_CLIENTS = "COLEXT_N_CLIENTS"
ENV_CLIENT_ID = "COLEXT_CLIENT_ID"
ENV_CLIENT_DEV_TYPE = "COLEXT_CLIENT_DEV_TYPE"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceGroup:
    dev_type: str
    count: int


@dataclass(frozen=True)
class DatasetConfig:
    classes: int = 3
    dim: int = 16
    samples_per_client: int = 250
    mean_scale: float = 3.0
    noise_sigma: float = 1.0
    seed: int | None = None


@dataclass
class ExperimentConfig:
    devices: list[DeviceGroup]
    client_entrypoint: str | None = None  # None selects the built-in client
    client_args: list[str] = field(default_factory=list)
    server_entrypoint: str | None = None
    server_args: list[str] = field(default_factory=list)
    scrape_interval_s: float = 0.3
    push_interval_s: float = 10.0
    seed: int = 0
    model: ModelSpec = field(default_factory=lambda: ModelSpec((16, 3), "none"))
    model_name: str = ""
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition_alpha: float | None = 1.0
    val_fraction: float = 0.2
    partition_seed: int | None = None
    time_scale: float = 1.0
    profiles: dict[str, DeviceProfile] = field(default_factory=dict)
    width_ratios: dict[str, float] = field(default_factory=dict)
    server_host: str = "127.0.0.1"
    server_port: int = 0  # 0 asks the launcher to pick a free port
    config_dir: Path = field(default_factory=Path.cwd)

    @property
    def n_clients(self) -> int:
        return sum(g.count for g in self.devices)

    def profile_for(self, dev_type: str) -> DeviceProfile:
        return get_profile(dev_type, self.profiles)

    def ratio_for(self, dev_type: str) -> float:
        if dev_type in self.width_ratios:
            return self.width_ratios[dev_type]
        return self.width_ratios.get("default", 1.0)

    def partition_plan(self) -> PartitionPlan:
        return PartitionPlan(
            num_clients=self.n_clients,
            alpha=self.partition_alpha,
            seed=self.partition_seed if self.partition_seed is not None else self.seed,
            val_fraction=self.val_fraction,
        )


def _expect_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(d: dict, allowed: set[str], path: str) -> None:
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _as_number(value, path: str, *, minimum=None, exclusive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if not math.isfinite(float(value)):
        raise ConfigError(f"{path}: must be finite")
    if minimum is not None:
        if exclusive and value <= minimum:
            raise ConfigError(f"{path}: must be > {minimum}, got {value}")
        if not exclusive and value < minimum:
            raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return int(value) if integer else float(value)


def _as_args(value, path: str) -> list[str]:
    # The convention allows args either as a list or as one whitespace-
    # separated string.
    if value is None:
        return []
    if isinstance(value, str):
        return value.split()
    if isinstance(value, list) and all(isinstance(a, str) for a in value):
        return list(value)
    raise ConfigError(f"{path}: expected a string or list of strings")


def _parse_code(section: dict, cfg: ExperimentConfig, path: str) -> None:
    _reject_unknown(section, {"client", "server"}, path)
    for role in ("client", "server"):
        if role not in section:
            continue
        sub = _expect_mapping(section[role], f"{path}.{role}")
        _reject_unknown(sub, {"entrypoint", "args"}, f"{path}.{role}")
        entrypoint = sub.get("entrypoint")
        if entrypoint is not None and not isinstance(entrypoint, str):
            raise ConfigError(f"{path}.{role}.entrypoint: expected a string")
        args = _as_args(sub.get("args"), f"{path}.{role}.args")
        if role == "client":
            cfg.client_entrypoint, cfg.client_args = entrypoint, args
        else:
            cfg.server_entrypoint, cfg.server_args = entrypoint, args


def _parse_devices(section, cfg: ExperimentConfig, path: str) -> None:
    if not isinstance(section, list) or not section:
        raise ConfigError(f"{path}: expected a non-empty list of device groups")
    groups = []
    for i, item in enumerate(section):
        sub = _expect_mapping(item, f"{path}[{i}]")
        _reject_unknown(sub, {"dev_type", "count"}, f"{path}[{i}]")
        if "dev_type" not in sub or "count" not in sub:
            raise ConfigError(f"{path}[{i}]: needs dev_type and count")
        count = _as_number(sub["count"], f"{path}[{i}].count", minimum=1, integer=True)
        groups.append(DeviceGroup(str(sub["dev_type"]), count))
    cfg.devices = groups


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    raw = _expect_mapping(raw, str(path))
    top_allowed = {
        "seed", "code", "devices", "monitoring", "model", "strategy",
        "training", "dataset", "partition", "emulation", "server_address",
    }
    _reject_unknown(raw, top_allowed, "config")
    if "devices" not in raw:
        raise ConfigError("config.devices: required section is missing")

    cfg = ExperimentConfig(devices=[], config_dir=path.parent.resolve())
    _parse_devices(raw["devices"], cfg, "devices")
    if "seed" in raw:
        cfg.seed = _as_number(raw["seed"], "seed", integer=True)
    if "code" in raw:
        _parse_code(_expect_mapping(raw["code"], "code"), cfg, "code")

    if "monitoring" in raw:
        mon = _expect_mapping(raw["monitoring"], "monitoring")
        _reject_unknown(mon, {"scrapping_interval", "push_to_db_interval"}, "monitoring")
        if "scrapping_interval" in mon:
            cfg.scrape_interval_s = _as_number(
                mon["scrapping_interval"], "monitoring.scrapping_interval", minimum=0, exclusive=True
            )
        if "push_to_db_interval" in mon:
            cfg.push_interval_s = _as_number(
                mon["push_to_db_interval"], "monitoring.push_to_db_interval", minimum=0, exclusive=True
            )

    if "model" in raw:
        sec = _expect_mapping(raw["model"], "model")
        _reject_unknown(sec, {"layers", "activation", "name"}, "model")
        layers = sec.get("layers", [16, 3])
        if not isinstance(layers, list) or len(layers) < 2:
            raise ConfigError("model.layers: expected a list of at least two widths")
        widths = tuple(
            _as_number(w, f"model.layers[{i}]", minimum=1, integer=True)
            for i, w in enumerate(layers)
        )
        activation = sec.get("activation", "relu" if len(widths) > 2 else "none")
        try:
            cfg.model = ModelSpec(widths, str(activation))
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc
        cfg.model_name = str(sec.get("name", ""))
    if not cfg.model_name:
        cfg.model_name = "x".join(str(w) for w in cfg.model.layer_widths)

    if "strategy" in raw:
        sec = _expect_mapping(raw["strategy"], "strategy")
        allowed = {
            "algorithm", "fraction_fit", "num_rounds", "target_accuracy",
            "round_deadline_s", "mu", "seed", "width_ratios",
        }
        _reject_unknown(sec, allowed, "strategy")
        kwargs = {}
        if "algorithm" in sec:
            kwargs["algorithm"] = str(sec["algorithm"])
        if "fraction_fit" in sec:
            kwargs["fraction_fit"] = _as_number(sec["fraction_fit"], "strategy.fraction_fit", minimum=0, exclusive=True)
        if "num_rounds" in sec:
            kwargs["num_rounds"] = _as_number(sec["num_rounds"], "strategy.num_rounds", minimum=1, integer=True)
        if sec.get("target_accuracy") is not None and "target_accuracy" in sec:
            kwargs["target_accuracy"] = _as_number(sec["target_accuracy"], "strategy.target_accuracy", minimum=0, exclusive=True)
        if sec.get("round_deadline_s") is not None and "round_deadline_s" in sec:
            kwargs["round_deadline_s"] = _as_number(sec["round_deadline_s"], "strategy.round_deadline_s", minimum=0, exclusive=True)
        if "mu" in sec:
            kwargs["mu"] = _as_number(sec["mu"], "strategy.mu", minimum=0)
        kwargs["seed"] = _as_number(sec["seed"], "strategy.seed", integer=True) if "seed" in sec else cfg.seed
        try:
            cfg.strategy = StrategyConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"strategy: {exc}") from exc
        ratios = sec.get("width_ratios", {})
        if ratios:
            ratios = _expect_mapping(ratios, "strategy.width_ratios")
            cfg.width_ratios = {
                str(k): _as_number(v, f"strategy.width_ratios.{k}", minimum=0, exclusive=True)
                for k, v in ratios.items()
            }
    else:
        cfg.strategy = StrategyConfig(seed=cfg.seed)

    if "training" in raw:
        sec = _expect_mapping(raw["training"], "training")
        _reject_unknown(sec, {"local_epochs", "batch_size", "learning_rate"}, "training")
        try:
            cfg.training = TrainConfig(
                local_epochs=_as_number(sec.get("local_epochs", 1), "training.local_epochs", minimum=1, integer=True),
                batch_size=_as_number(sec.get("batch_size", 32), "training.batch_size", minimum=1, integer=True),
                learning_rate=_as_number(sec.get("learning_rate", 0.1), "training.learning_rate", minimum=0),
            )
        except ValueError as exc:
            raise ConfigError(f"training: {exc}") from exc

    if "dataset" in raw:
        sec = _expect_mapping(raw["dataset"], "dataset")
        _reject_unknown(sec, {"classes", "dim", "samples_per_client", "mean_scale", "noise_sigma", "seed"}, "dataset")
        cfg.dataset = DatasetConfig(
            classes=_as_number(sec.get("classes", 3), "dataset.classes", minimum=2, integer=True),
            dim=_as_number(sec.get("dim", 16), "dataset.dim", minimum=1, integer=True),
            samples_per_client=_as_number(sec.get("samples_per_client", 250), "dataset.samples_per_client", minimum=2, integer=True),
            mean_scale=_as_number(sec.get("mean_scale", 3.0), "dataset.mean_scale", minimum=0, exclusive=True),
            noise_sigma=_as_number(sec.get("noise_sigma", 1.0), "dataset.noise_sigma", minimum=0),
            seed=_as_number(sec["seed"], "dataset.seed", integer=True) if "seed" in sec else None,
        )

    if "partition" in raw:
        sec = _expect_mapping(raw["partition"], "partition")
        _reject_unknown(sec, {"alpha", "iid", "val_fraction", "seed"}, "partition")
        if sec.get("iid") and "alpha" in sec:
            raise ConfigError("partition: alpha and iid are mutually exclusive")
        if sec.get("iid"):
            cfg.partition_alpha = None
        elif "alpha" in sec:
            cfg.partition_alpha = _as_number(sec["alpha"], "partition.alpha", minimum=0, exclusive=True)
        if "val_fraction" in sec:
            cfg.val_fraction = _as_number(sec["val_fraction"], "partition.val_fraction", minimum=0, exclusive=True)
            if cfg.val_fraction >= 1.0:
                raise ConfigError("partition.val_fraction: must be < 1")
        if "seed" in sec:
            cfg.partition_seed = _as_number(sec["seed"], "partition.seed", integer=True)

    if "emulation" in raw:
        sec = _expect_mapping(raw["emulation"], "emulation")
        _reject_unknown(sec, {"time_scale", "profiles_file"}, "emulation")
        if "time_scale" in sec:
            cfg.time_scale = _as_number(sec["time_scale"], "emulation.time_scale", minimum=0, exclusive=True)
        if "profiles_file" in sec:
            profile_path = Path(str(sec["profiles_file"]))
            if not profile_path.is_absolute():
                profile_path = cfg.config_dir / profile_path
            try:
                cfg.profiles = load_profiles(profile_path)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"emulation.profiles_file: {exc}") from exc

    if "server_address" in raw:
        addr = str(raw["server_address"])
        host, _, port = addr.rpartition(":")
        if not host or not port.lstrip("-").isdigit():
            raise ConfigError(f"server_address: expected host:port, got {addr!r}")
        cfg.server_host, cfg.server_port = host, int(port)
        if not (0 <= cfg.server_port <= 65535):
            raise ConfigError(f"server_address: port {cfg.server_port} out of range")

    # Every dev_type must resolve to a profile, and the dataset must be big
    # enough to give each client a non-trivial shard.
    for group in cfg.devices:
        try:
            cfg.profile_for(group.dev_type)
        except KeyError as exc:
            raise ConfigError(f"devices: {exc.args[0]}") from exc
    for dev_type in cfg.width_ratios:
        if dev_type != "default" and dev_type not in {g.dev_type for g in cfg.devices}:
            raise ConfigError(f"strategy.width_ratios.{dev_type}: not in the devices list")
    return cfg


_PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def substitute_env(args: list[str], env_map: dict[str, str]) -> list[str]:
    """Replace every ${NAME} token from env_map; unresolved names are an error."""
    resolved = []
    for arg in args:
        def _repl(match: re.Match) -> str:
            name = match.group(1)
            if name not in env_map:
                raise ConfigError(f"unresolved placeholder '${{{name}}}' in arg {arg!r}")
            return str(env_map[name])

        resolved.append(_PLACEHOLDER.sub(_repl, arg))
    return resolved
