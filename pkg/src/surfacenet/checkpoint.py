"""Single-file archives holding generator and discriminator state.

Layout (a ``torch.save`` dict):
    format_version, iteration,
    generator/config, generator/state, discriminator/config, discriminator/state,
    optim/generator, optim/discriminator, rng/torch, extra
Network modules can write archives with only their own namespace filled.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_archive(path, payload: dict) -> Path:
    """Write atomically so an interrupted save never leaves a truncated archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save({"format_version": FORMAT_VERSION, **payload}, tmp)
    os.replace(tmp, path)
    return path


def load_archive(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # truncated or corrupt zip / pickle
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("format_version") != FORMAT_VERSION:
        got = data.get("format_version") if isinstance(data, dict) else type(data).__name__
        raise CheckpointError(f"{path}: unsupported checkpoint format {got!r}, expected {FORMAT_VERSION}")
    return data


def check_state_compatible(module: torch.nn.Module, state: dict, namespace: str) -> None:
    """Raise listing every name/shape disagreement between ``state`` and ``module``."""
    own = module.state_dict()
    problems = []
    for name, t in own.items():
        if name not in state:
            problems.append(f"{namespace}/{name}: missing from checkpoint")
        elif tuple(state[name].shape) != tuple(t.shape):
            problems.append(f"{namespace}/{name}: checkpoint shape {tuple(state[name].shape)} != model shape {tuple(t.shape)}")
    problems += [f"{namespace}/{name}: unexpected in checkpoint" for name in state if name not in own]
    if problems:
        raise CheckpointError(f"checkpoint does not match the current {namespace} config; first mismatch: {problems[0]}"
                              + "".join(f"\n  {p}" for p in problems))


def save_network(path, net: torch.nn.Module, namespace: str) -> Path:
    return save_archive(path, {f"{namespace}/config": net.config.to_dict(), f"{namespace}/state": net.state_dict()})


def load_network_state(net: torch.nn.Module, data: dict, namespace: str) -> None:
    key = f"{namespace}/state"
    if key not in data:
        raise CheckpointError(f"checkpoint has no {namespace} namespace")
    check_state_compatible(net, data[key], namespace)
    net.load_state_dict(data[key])
