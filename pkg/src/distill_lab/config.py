"""Line-oriented ``key = value`` configuration with ``[section]`` headers.

Keys before the first header belong to ``[experiment]``. Unknown sections or
keys are errors. Every key has a default; some experiments override a few
defaults (see ``EXPERIMENT_DEFAULTS``). :func:`dump_config` writes the fully
resolved spec, which parses back to an identical spec.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

EXPERIMENTS = ("term-ablation", "guidance-sweep", "restore", "cosine-diag", "c-ablation",
               "lambda-ablation", "multiview", "chain-check")


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _strs(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_float(text):
    text = text.strip()
    return None if text in ("", "none") else float(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "name": (str, "guidance-sweep"),
        "sweep_axis": (str, "none"),
        "sweep_values": (_strs, ()),
        "estimators": (_strs, ("isd",)),
        "out": (str, "runs"),
        "variance_samples": (int, 256),
    },
    "estimator": {
        "w": (float, 7.5),
        "c": (int, 20),
        "inv_mode": (str, "renoise"),
        "neg_mode": (str, "shifted-time"),
        "neg_label": (str, "neg"),
        "sigma_vsd": (float, 0.5),
        "weight_mode": (str, "one-minus-alpha-bar"),
        "lambda_mode": (str, "snr-ratio"),
    },
    "model": {
        "kind": (str, "oracle"),
        "file": (str, ""),
    },
    "prior": {
        "name": (str, "two-condition-2d"),
        "sdev": (float, 0.25),
        "mean": (_floats, (1.0, -0.5)),
        "components": (str, ""),
        "condition_weights": (str, ""),
        "cond": (str, "y1"),
    },
    "renderer": {
        "kind": (str, "identity"),
        "scene": (str, "disk"),
        "scene2": (str, ""),
        "grid": (int, 8),
        "poses": (int, 8),
        "bins": (int, 16),
    },
    "schedule": {
        "kind": (str, "ddpm-linear"),
        "T": (int, 1000),
    },
    "timesteps": {
        "lo": (float, 0.02),
        "hi": (float, 0.98),
        "anneal_at": (float, 0.2),
        "lo2": (float, 0.02),
        "hi2": (float, 0.50),
    },
    "optimizer": {
        "lr": (float, 0.01),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 0.0),
        "steps": (int, 2000),
        "batch": (int, 1),
    },
    "run": {
        "seed": (int, 0),
        "init": (str, "zeros"),
        "init_scale": (float, 1.0),
        "init_vector": (_floats, ()),
        "snapshot_every": (int, 0),
    },
    "restore": {
        "perturb": (_floats, (0.5,)),
        "t_frac": (float, 0.6),
        "steps": (int, 200),
    },
    "sample": {
        "stride": (int, 20),
        "sigma": (str, "zero"),
        "cfg_w": (_opt_float, None),
        "n": (int, 2000),
    },
    "train": {
        "steps": (int, 20000),
        "batch": (int, 128),
        "lr": (float, 1e-3),
        "widths": (lambda s: tuple(int(v) for v in _strs(s)), (64, 64)),
        "p_uncond": (float, 0.1),
        "out_file": (str, "denoiser.mlpd"),
        "eval_samples": (int, 4000),
    },
}

EXPERIMENT_DEFAULTS = {
    "term-ablation": {
        ("experiment", "sweep_axis"): "init",
        ("experiment", "sweep_values"): ("noise", "prior-sample"),
        ("experiment", "estimators"): ("recon-only", "cfg-only", "sds"),
        ("estimator", "w"): 100.0,
    },
    "guidance-sweep": {
        ("experiment", "sweep_axis"): "w",
        ("experiment", "sweep_values"): ("2.5", "7.5", "25", "100"),
        ("experiment", "estimators"): ("sds",),
    },
    "restore": {
        ("experiment", "estimators"): ("recon-only", "isd"),
        ("prior", "name"): "delta-2d",
        ("prior", "cond"): "y",
    },
    "cosine-diag": {
        ("experiment", "estimators"): ("sds", "isd"),
    },
    "c-ablation": {
        ("experiment", "sweep_axis"): "c",
        ("experiment", "sweep_values"): ("1", "20", "50"),
    },
    "lambda-ablation": {
        ("experiment", "sweep_axis"): "lambda_mode",
        ("experiment", "sweep_values"): ("snr-ratio", "constant"),
    },
    "multiview": {
        ("renderer", "kind"): "projection",
        ("prior", "sdev"): 0.0,
        ("prior", "cond"): "y",
        ("optimizer", "steps"): 5000,
    },
    "chain-check": {
        ("prior", "name"): "delta-2d",
        ("prior", "cond"): "y",
    },
}

SWEEP_AXES = {
    "none": None,
    "w": ("estimator", "w"),
    "c": ("estimator", "c"),
    "lambda_mode": ("estimator", "lambda_mode"),
    "inv_mode": ("estimator", "inv_mode"),
    "sigma_vsd": ("estimator", "sigma_vsd"),
    "seed": ("run", "seed"),
    "init": ("run", "init"),
    "lr": ("optimizer", "lr"),
    "prior_sdev": ("prior", "sdev"),
}


@dataclass
class ExperimentSpec:
    """A fully defaulted experiment: ``values[section][key]``."""

    values: dict

    @property
    def name(self) -> str:
        return self.values["experiment"]["name"]

    def section(self, name: str) -> dict:
        return self.values[name]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def with_value(self, section: str, key: str, raw) -> "ExperimentSpec":
        parser, _ = SCHEMA[section][key]
        new = {s: dict(kv) for s, kv in self.values.items()}
        new[section][key] = parser(raw) if isinstance(raw, str) else raw
        return ExperimentSpec(new)

    def sweep(self):
        axis = self.get("experiment", "sweep_axis")
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
        values = self.get("experiment", "sweep_values")
        if SWEEP_AXES[axis] is not None and not values:
            raise ConfigError(f"sweep axis {axis!r} set without sweep_values")
        return axis, SWEEP_AXES[axis], values


def defaults(name: str) -> dict:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for (sec, key), val in EXPERIMENT_DEFAULTS.get(name, {}).items():
        values[sec][key] = val
    values["experiment"]["name"] = name
    return values


def parse_text(text: str, source: str = "<config>") -> ExperimentSpec:
    raw: dict = {}
    section = "experiment"
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        if (section, key) in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} in [{section}]")
        parser, _ = SCHEMA[section][key]
        try:
            raw[(section, key)] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {section}.{key}: {exc}") from None
    name = raw.get(("experiment", "name"), SCHEMA["experiment"]["name"][1])
    values = defaults(name)
    for (sec, key), val in raw.items():
        values[sec][key] = val
    spec = ExperimentSpec(values)
    spec.sweep()
    return spec


def parse_config(path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(), str(path))


def dump_config(spec: ExperimentSpec) -> str:
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key in keys:
            lines.append(f"{key} = {_fmt(spec.values[sec][key])}")
        lines.append("")
    return "\n".join(lines)
