"""Plain-text key=value run configuration with strict key validation.

One flat namespace covers dataset, model, and training knobs; unknown keys
are rejected before any compute.  ``resolve`` splits a validated mapping
into the three concrete config objects.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig
from .training import TrainConfig
from . import tasks


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


# key -> (section, field, parser)
SCHEMA = {
    "family": ("dataset", "family", str),
    "size": ("dataset", "size", int),
    "width": ("dataset", "width", int),
    "height": ("dataset", "height", int),
    "max_steps": ("dataset", "max_steps", int),
    "max_hazards": ("dataset", "max_hazards", int),
    "train_ratio": ("dataset", "train_ratio", float),

    "hidden_dim": ("model", "hidden_dim", int),
    "n_layers": ("model", "n_layers", int),
    "n_heads": ("model", "n_heads", int),
    "max_seq_len": ("model", "max_seq_len", int),
    "latent_k": ("model", "latent_k", int),
    "query_layer": ("model", "query_layer", int),

    "structure": ("train", "structure", str),
    "mechanism": ("train", "mechanism", str),
    "stage1_epochs": ("train", "stage1_epochs", int),
    "stage2_epochs": ("train", "stage2_epochs", int),
    "lr": ("train", "lr", float),
    "weight_decay": ("train", "weight_decay", float),
    "lambda_sim": ("train", "lambda_sim", float),
    "tau": ("train", "tau", float),
    "group_limit": ("train", "group_limit", int),
    "ema_every": ("train", "ema_every", int),
    "detach_feedback": ("train", "detach_feedback", _bool),
    "shuffle": ("train", "shuffle", _bool),
    "eval_every": ("train", "eval_every", int),
    "eval_limit": ("train", "eval_limit", int),
    "max_gen_tokens": ("train", "max_gen_tokens", int),

    "seed": ("common", "seed", int),
}


def parse_kv_lines(lines, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config_file(path) -> dict:
    with open(path) as fh:
        return parse_kv_lines(fh, origin=str(path))


@dataclass
class RunConfig:
    dataset: tasks.DatasetSpec
    model: ModelConfig
    train: TrainConfig
    raw: dict


def resolve(kv: dict) -> RunConfig:
    """Validate a raw key->string mapping into concrete config objects."""
    sections = {"dataset": {}, "model": {}, "train": {}, "common": {}}
    for key, value in kv.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        section, fieldname, parser = SCHEMA[key]
        try:
            sections[section][fieldname] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"key {key!r}: {exc}") from exc

    seed = sections["common"].get("seed", 42)
    latent_k = sections["model"].pop("latent_k", 8)
    try:
        dataset = tasks.DatasetSpec(seed=seed, latent_k=latent_k, **sections["dataset"])
        model = ModelConfig(vocab_size=tasks.VOCAB_SIZE,
                            patch_feature_dim=tasks.PATCH_FEATURE_DIM,
                            latent_k=latent_k, seed=seed, **sections["model"])
        train = TrainConfig(seed=seed, **sections["train"])
    except (ValueError, tasks.DatasetFormatError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(dataset=dataset, model=model, train=train, raw=dict(kv))


def echo_lines(run: RunConfig) -> list:
    """Fully resolved config as sorted key=value lines (run-record echo)."""
    from dataclasses import asdict
    values = {}
    ds = asdict(run.dataset)
    md = asdict(run.model)
    tr = asdict(run.train)
    for key, (section, fieldname, _parser) in SCHEMA.items():
        if section == "dataset":
            values[key] = ds[fieldname]
        elif section == "model":
            values[key] = md.get(fieldname, ds.get(fieldname))
        elif section == "train":
            values[key] = tr[fieldname]
        else:
            values[key] = md["seed"]
    return [f"{k}={values[k]}" for k in sorted(values)]
