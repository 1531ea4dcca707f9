"""Experiment configuration: one YAML/JSON file plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .sim import SWEEP_DEVICES, SimConfig, derive_seed

DEFAULT_CLASSIFIERS = {
    "lda": {"reg": 1e-6},
    "lr": {"l2": 1e-4, "learning_rate": "auto", "max_iter": 500, "tol": 1e-6},
    "svm": {"l2": 1e-4, "learning_rate": "auto", "max_iter": 500, "tol": 1e-6},
    "mlp": {"hidden_layer_sizes": [32], "activation": "sigmoid", "epochs": 50,
            "learning_rate": 0.1, "batch_size": 64, "init_range": 0.5},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    train_path: Path | None = None
    test_path: Path | None = None
    synthetic: dict | None = None  # {"n": int, "seed": int}: generate data instead of reading files
    models: list[str] = field(default_factory=lambda: ["lda", "lr", "svm", "mlp"])
    classifiers: dict = field(default_factory=dict)
    sim: SimConfig = field(default_factory=SimConfig)
    sweep_models: list[str] = field(default_factory=lambda: ["lda", "lr"])
    sweep_devices: list[int] = field(default_factory=lambda: list(SWEEP_DEVICES))
    out: Path = Path("runs/default")

    def classifier_params(self, kind: str) -> dict:
        params = dict(DEFAULT_CLASSIFIERS.get(kind, {}))
        params.update(self.classifiers.get(kind) or {})
        if kind == "mlp":
            params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
            params.setdefault("random_state", derive_seed(self.seed, "mlp"))
        return params

    def validate(self):
        if self.synthetic is None:
            if self.train_path is None:
                raise ConfigError("no training data: set data.train or data.synthetic")
            for p in (self.train_path, self.test_path):
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"data file not found: {p}")
        unknown = set(self.models) | set(self.sweep_models)
        unknown -= set(DEFAULT_CLASSIFIERS)
        if unknown:
            raise ConfigError(f"unknown model kinds: {sorted(unknown)}")
        return self


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Build a config from ``path`` (YAML or JSON), then apply non-None overrides.

    Relative data paths resolve against the config file's directory; ``out``
    is taken relative to the working directory.
    """
    doc = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        base = path.parent
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    seed_override = overrides.pop("seed", None)
    seed = doc.get("seed") if seed_override is None else seed_override
    if seed is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    data = doc.get("data") or {}
    sweep = doc.get("sweep") or {}
    sim_doc = dict(doc.get("sim") or {})
    if seed_override is not None or "seed" not in sim_doc:
        sim_doc["seed"] = int(seed)
    try:
        sim = SimConfig.from_dict(sim_doc)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"invalid sim section: {exc}") from exc
    cfg = ExperimentConfig(
        seed=int(seed),
        train_path=resolve(data.get("train")),
        test_path=resolve(data.get("test")),
        synthetic=data.get("synthetic"),
        models=list(doc.get("models") or ["lda", "lr", "svm", "mlp"]),
        classifiers=doc.get("classifiers") or {},
        sim=sim,
        sweep_models=list(sweep.get("models") or ["lda", "lr"]),
        sweep_devices=list(sweep.get("devices") or SWEEP_DEVICES),
        out=Path(doc.get("out", "runs/default")),
    )
    if overrides.get("train_path") is not None:
        cfg.train_path = Path(overrides["train_path"])
        cfg.synthetic = None
    if overrides.get("test_path") is not None:
        cfg.test_path = Path(overrides["test_path"])
    if overrides.get("synthetic") is not None:
        cfg.synthetic = {"n": int(overrides["synthetic"]), "seed": derive_seed(cfg.seed, "dataset")}
    if overrides.get("models"):
        cfg.models = list(overrides["models"])
        cfg.sweep_models = list(overrides["models"])
    if overrides.get("devices"):
        cfg.sweep_devices = list(overrides["devices"])
        cfg.sim = replace(cfg.sim, n_devices=cfg.sweep_devices[-1])
    if overrides.get("out") is not None:
        cfg.out = Path(overrides["out"])
    return cfg.validate()


def parse_devices(text: str) -> list[int]:
    """``"400"`` -> [400]; ``"50-400"`` -> 50,100,...,400; ``"50:400:25"`` -> explicit step; ``"50,100"`` -> list."""
    text = text.strip()
    try:
        if "," in text:
            return [int(t) for t in text.split(",")]
        if ":" in text:
            lo, hi, step = (int(t) for t in text.split(":"))
            return list(range(lo, hi + 1, step))
        if "-" in text:
            lo, hi = (int(t) for t in text.split("-"))
            return list(range(lo, hi + 1, 50))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"cannot parse device spec {text!r}") from None
