"""Run configuration: flat key=value files with CLI override semantics.

Files are line-oriented UTF-8, '#' starts a comment, keys are a fixed
registry (unknown keys are rejected). Every run writes its fully-resolved
configuration next to its outputs, and that file fed back in reproduces
the run.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


def _bool(s):
    if isinstance(s, bool):
        return s
    low = str(s).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type constructor, default); None default means "unset"
REGISTRY = {
    # attack hyperparameters
    "k0": (float, 0.001),
    "lambda_k": (float, 0.01),
    "gamma_k": (float, 0.5),
    "surrogate_lr": (float, 1e-5),
    "surrogate_beta1": (float, 0.99),
    "surrogate_beta2": (float, 0.99),
    "surrogate_eps": (float, 1e-8),
    "generator_lr": (float, 1e-5),
    "generator_beta1": (float, 0.99),
    "generator_beta2": (float, 0.99),
    "generator_eps": (float, 1e-8),
    "batch_size": (int, 64),
    "latent_dim": (int, 10),
    "budget": (int, 1_280_000),
    "max_steps": (int, 0),
    "probe_size": (int, 64),
    "fidelity_probe": (str, "reuse"),
    "stop_fidelity": (float, 0.0),
    "stop_combined": (float, 0.0),
    "stop_m_global": (float, 0.0),
    # reconstruction
    "samples": (int, 1000),
    "presence_threshold": (float, 0.90),
    "presence_percentile": (float, 50.0),
    "blur_sigma": (float, 1.0),
    "blur_kernel": (int, 5),
    "edge": (str, "laplacian"),
    "normalize_output": (_bool, True),
    # training
    "epochs": (int, 20),
    "train_batch_size": (int, 64),
    "lr": (float, 0.0),  # 0: optimizer default
    "optimizer": (str, "adam"),
    "dp_clip": (float, 0.0),
    "dp_noise": (float, 0.0),
    "dp_lr": (float, 0.1),
    "test_fraction": (float, 1 / 7),
    "resize_h": (int, 28),
    "resize_w": (int, 28),
    # shared
    "seed": (int, 0),
}

ATTACK_KEYS = ("k0", "lambda_k", "gamma_k", "surrogate_lr", "surrogate_beta1",
               "surrogate_beta2", "surrogate_eps", "generator_lr",
               "generator_beta1", "generator_beta2", "generator_eps",
               "batch_size", "latent_dim", "budget", "max_steps", "probe_size",
               "fidelity_probe", "stop_fidelity", "stop_combined",
               "stop_m_global", "seed")


def defaults():
    return {k: v for k, (_, v) in REGISTRY.items()}


def parse_value(key, raw):
    if key not in REGISTRY:
        raise ConfigError(f"unknown configuration key {key!r}")
    ctor = REGISTRY[key][0]
    try:
        return ctor(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_file(path):
    """Parse a key=value config file into a dict (registry-checked)."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def resolve(file_path=None, overrides=None):
    """defaults < config file < explicit overrides."""
    cfg = defaults()
    if file_path:
        cfg.update(load_file(file_path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in REGISTRY:
            raise ConfigError(f"unknown configuration key {key!r}")
        cfg[key] = REGISTRY[key][0](val)
    return cfg


def dump(cfg, path):
    """Write a resolved configuration, diffable and reload-stable."""
    lines = [f"{k}={_fmt(cfg[k])}" for k in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
