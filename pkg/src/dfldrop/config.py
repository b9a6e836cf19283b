"""INI experiment configuration.

Omitted keys take the published defaults. Unknown sections and keys are
rejected so a typo never silently falls back to a default. Relative paths are
resolved against the config file's directory.

Example::

    [dataset]
    name = digits
    path = ../data/digits.csv
    grid_shape = 8x8

    [experiment]
    algorithms = dfedavgm
    partitions = iid, clusters, classes

    [strategies]
    names = reference, model-inversion
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .datahub import SCHEMES
from .engine import STRATEGIES, FederationConfig
from .exceptions import ConfigError
from .fedalgos import ALGORITHMS, Algorithm
from .recon import ReconConfig

_SCHEMA = {
    "dataset": {"name": str, "path": "path", "header": bool, "grid_shape": "grid", "normalize": bool},
    "experiment": {"algorithms": "list", "partitions": "list", "folds": int, "seed": int, "out": "path?"},
    "federation": {
        "clients": int, "rounds": int, "pairs": int, "local_steps_min": int, "local_steps_max": int,
        "dropout_round": int, "dropout_client": "int?", "early_stopping": bool, "patience": int,
        "silo_cap": "int?", "hidden": "ints",
    },
    "strategies": {"names": "list"},
    "recon": {
        "n_points": int, "batch_size": int, "tv_weight": float, "domain_weight": float, "init": str,
        "mi_lr": float, "mi_weight_decay": float, "mi_epochs": int, "gi_lr": float, "gi_epochs": int,
        "gi_distance": str, "gi_joint_labels": bool, "gi_label_weight": float, "gi_target_scale": float,
        "random_pretrain_epochs": int,
    },
    "report": {"svg": bool, "dump_recon": bool},
}
_ALGO_KEYS = {"lr": float, "momentum": float, "omega": float, "lam": float, "probes": int,
              "fsr_root": bool, "batch_size": "int?"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_name: str
    dataset_path: Path
    header: bool = False
    grid_shape: tuple[int, int] | None = None
    normalize: bool = True
    algorithms: dict[str, Algorithm] = field(default_factory=lambda: {"dfedavgm": Algorithm.default("dfedavgm")})
    partitions: tuple[str, ...] = SCHEMES
    strategies: tuple[str, ...] = STRATEGIES
    folds: int = 10
    seed: int = 0
    out: Path | None = None
    federation: dict = field(default_factory=dict)
    recon: ReconConfig = field(default_factory=ReconConfig)
    svg: bool = True
    dump_recon: bool = True

    def federation_config(self, algo: str, partition: str, strategy: str) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            algorithm=self.algorithms[algo], strategy=strategy, partition=partition,
            n_clients=f.get("clients", 3), rounds=f.get("rounds", 200), pairs=f.get("pairs", 2),
            local_steps=(f.get("local_steps_min", 5), f.get("local_steps_max", 10)),
            dropout_round=f.get("dropout_round", 5), dropout_client=f.get("dropout_client"),
            early_stopping=f.get("early_stopping", True), patience=f.get("patience", 10),
            hidden=tuple(f.get("hidden", ())), silo_cap=f.get("silo_cap", 200), recon=self.recon)

    def cells(self):
        """Every (algorithm, partition, strategy) triple in run order."""
        return [(a, p, s) for a in self.algorithms for p in self.partitions for s in self.strategies]


def _convert(section: str, key: str, raw: str, kind, base: Path):
    where = f"[{section}] {key}"
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, float, str):
            return kind(raw)
        if kind == "int?":
            return None if raw == "" or raw.lower() == "none" else int(raw)
        if kind == "list":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "grid":
            if raw == "" or raw.lower() == "none":
                return None
            h, w = (int(v) for v in raw.lower().split("x"))
            return (h, w)
        if kind in ("path", "path?"):
            if raw == "" and kind == "path?":
                return None
            p = Path(raw)
            return p if p.is_absolute() else (base / p)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    raise AssertionError(kind)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep keys case-sensitive so typos are caught
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.resolve().parent
    values: dict[str, dict] = {}
    algo_overrides: dict[str, dict] = {}
    for section in parser.sections():
        if section.startswith("algorithm."):
            name = section.split(".", 1)[1]
            if name not in ALGORITHMS:
                raise ConfigError(f"[{section}]: unknown algorithm {name!r}")
            schema, target = _ALGO_KEYS, algo_overrides.setdefault(name, {})
        elif section in _SCHEMA:
            schema, target = _SCHEMA[section], values.setdefault(section, {})
        else:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"[{section}]: unknown key {key!r}")
            target[key] = _convert(section, key, raw, schema[key], base)

    ds = values.get("dataset", {})
    if "path" not in ds:
        raise ConfigError("[dataset] path is required")
    if not ds["path"].is_file():
        raise ConfigError(f"[dataset] path: file not found: {ds['path']}")
    exp = values.get("experiment", {})

    algo_names = exp.get("algorithms", ("dfedavgm",))
    for name in list(algo_names) + list(algo_overrides):
        if name not in ALGORITHMS:
            raise ConfigError(f"[experiment] algorithms: unknown algorithm {name!r}")
    algorithms = {}
    for name in algo_names:
        try:
            algorithms[name] = Algorithm.default(name, **algo_overrides.get(name, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[algorithm.{name}]: {exc}") from None

    partitions = exp.get("partitions", SCHEMES)
    for p in partitions:
        if p not in SCHEMES:
            raise ConfigError(f"[experiment] partitions: unknown scheme {p!r}")
    strategies = values.get("strategies", {}).get("names", ()) or STRATEGIES
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"[strategies] names: unknown strategy {s!r}")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("[strategies] names: duplicate entries")

    try:
        recon = ReconConfig(**values.get("recon", {}))
    except ConfigError as exc:
        raise ConfigError(f"[recon]: {exc}") from None

    folds = exp.get("folds", 10)
    if folds < 2:
        raise ConfigError("[experiment] folds: need at least 2")
    rep = values.get("report", {})
    cfg = ExperimentConfig(
        dataset_name=ds.get("name", ds["path"].stem), dataset_path=ds["path"], header=ds.get("header", False),
        grid_shape=ds.get("grid_shape"), normalize=ds.get("normalize", True), algorithms=algorithms,
        partitions=tuple(partitions), strategies=tuple(strategies), folds=folds, seed=exp.get("seed", 0),
        out=exp.get("out"), federation=values.get("federation", {}), recon=recon,
        svg=rep.get("svg", True), dump_recon=rep.get("dump_recon", True))
    # build one federation config per cell so invariant violations surface now
    for a, p, s in cfg.cells():
        try:
            cfg.federation_config(a, p, s)
        except ConfigError as exc:
            raise ConfigError(f"[federation]: {exc}") from None
    return cfg
