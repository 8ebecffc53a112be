"""Checkpoints: one ``.npz`` holding parameters, Adam moments and a JSON header.

Array keys: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` and
``__header__`` (a 0-d unicode array with the JSON header).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigHashMismatch, MissingArtifactError
from .models import ModelConfig, build_model
from .training import TrainState

CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, model, state: TrainState | None = None,
                    meta: dict | None = None) -> None:
    names = [n for n, _ in model.named_parameters()]
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    header = {"checkpoint_version": CHECKPOINT_VERSION, "model_config": model.cfg.to_dict(),
              "family": model.cfg.family, "param_names": names, **(meta or {})}
    if hasattr(model, "extra_state"):
        header.update(model.extra_state())
    if state is not None:
        header.update(step=state.step, updates=state.updates, skipped=state.skipped,
                      best_dev=state.best_dev, best_step=state.best_step,
                      rng_state=state.rng.bit_generator.state)
        for n, m, v in zip(names, state.m, state.v):
            arrays[f"adam_m/{n}"] = m
            arrays[f"adam_v/{n}"] = v
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True, default=_jsonable))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serialisable: {type(x)}")


def read_header(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no checkpoint at {path}; run `seqdensity train` first")
    with np.load(path) as z:
        return json.loads(str(z["__header__"]))


def load_checkpoint(path: Path, expect_hash: str | None = None):
    """Rebuild the model (and optimiser state when stored). Returns (model, state, header)."""
    header = read_header(path)
    if expect_hash is not None and header.get("config_hash") not in (None, expect_hash):
        raise ConfigHashMismatch(
            f"checkpoint {path} was produced by config {header.get('config_hash')}, "
            f"expected {expect_hash}")
    cfg = ModelConfig(**header["model_config"])
    model = build_model(cfg, seed=0)
    with np.load(path) as z:
        model.load_state_dict({n: z[f"param/{n}"] for n in header["param_names"]})
        state = None
        if "step" in header:
            names = header["param_names"]
            has_moments = all(f"adam_m/{n}" in z for n in names)
            m = [z[f"adam_m/{n}"].copy() if has_moments else np.zeros_like(z[f"param/{n}"])
                 for n in names]
            v = [z[f"adam_v/{n}"].copy() if has_moments else np.zeros_like(z[f"param/{n}"])
                 for n in names]
            rng = np.random.default_rng()
            rng.bit_generator.state = header["rng_state"]
            state = TrainState(header["step"], m, v, header["updates"], header["skipped"],
                               header["best_dev"], header["best_step"], rng)
    if hasattr(model, "load_extra_state"):
        model.load_extra_state(header)
    model.eval()
    return model, state, header
