"""Sectioned key=value run configuration ([train], [decode], [data], [experiment])."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataError, Dataset, SyntheticSpec, generate_lemma_world, generate_synthetic, \
    load_counts, load_pointcloud_csv, read_matrix_csv
from .decode import DecodeConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DATA_KEYS = {"source": str, "path": str, "labels_path": str, "seed": int, "n": int, "top_genes": int,
             "points_per_component": int, "data_dim": int, "separation": float}
EXPERIMENT_KEYS = {"method": str, "runs": int, "k_override": int, "eval_rows": int, "split_seed": int,
                   "vary_key": str, "vary_values": str, "ks": str, "priors": str, "restarts": int,
                   "output": str}
SOURCES = ("synthetic", "lemma", "csv", "pointcloud", "counts")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    experiment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "decode": asdict(self.decode), "data": dict(self.data),
                "experiment": dict(self.experiment)}

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _typed(section: str, values: dict, schema: dict) -> dict:
    out = {}
    for key, raw in values.items():
        if key not in schema:
            raise ConfigError(f"[{section}] unknown key {key!r}; known: {sorted(schema)}")
        try:
            out[key] = schema[key](raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {schema[key].__name__}") from None
    return out


def decode_config_from_mapping(values: dict) -> DecodeConfig:
    schema = {f.name: type(getattr(DecodeConfig(), f.name)) for f in fields(DecodeConfig)}
    schema["lambda"] = float  # the conventional name for ``lam``
    typed = _typed("decode", values, schema)
    if "lambda" in typed:
        typed["lam"] = typed.pop("lambda")
    return DecodeConfig(**typed)


def parse_config(text: str, origin: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    unknown = set(parser.sections()) - {"train", "decode", "data", "experiment"}
    if unknown:
        raise ConfigError(f"{origin}: unknown sections {sorted(unknown)}")
    sect = {s: dict(parser[s]) if parser.has_section(s) else {} for s in ("train", "decode", "data", "experiment")}
    try:
        train = TrainConfig.from_mapping(sect["train"])
        decode = decode_config_from_mapping(sect["decode"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    data = {"source": "synthetic", **_typed("data", sect["data"], DATA_KEYS)}
    if data["source"] not in SOURCES:
        raise ConfigError(f"[data] source must be one of {SOURCES}, got {data['source']!r}")
    experiment = _typed("experiment", sect["experiment"], EXPERIMENT_KEYS)
    return RunConfig(train, decode, data, experiment)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def load_dataset(data: dict) -> Dataset:
    source = data.get("source", "synthetic")
    seed = data.get("seed", 0)
    if source == "synthetic":
        kw = {k: data[k] for k in ("points_per_component", "data_dim", "separation") if k in data}
        return generate_synthetic(SyntheticSpec(seed=seed, **kw))
    if source == "lemma":
        return generate_lemma_world(n=data.get("n", 10000), seed=seed)
    if "path" not in data:
        raise DataError(f"[data] source = {source} needs a path")
    if source == "pointcloud":
        return load_pointcloud_csv(data["path"])
    if source == "counts":
        return load_counts(data["path"], top_genes=data.get("top_genes", 720),
                           labels_path=data.get("labels_path"))
    X, y, _ = read_matrix_csv(data["path"])
    return Dataset(X, y, Path(data["path"]).stem, {"path": data["path"]})
