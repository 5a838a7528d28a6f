"""Versioned checkpoint files: flat parameter vectors, optimizer moments,
and the training RNG state, in a single npz archive."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .policy import CriticSet, GaussianPolicy

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    policy: GaussianPolicy,
    critics: CriticSet,
    epoch: int,
    env_id: str,
    hidden: int,
    rng: np.random.Generator | None = None,
    extra: dict | None = None,
):
    meta = {
        "version": FORMAT_VERSION,
        "env_id": env_id,
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "hidden": hidden,
        "epoch": int(epoch),
        "extra": extra or {},
    }
    arrays = {
        "meta_json": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        "policy_params": policy.get_params(),
    }
    for name, critic in critics.networks().items():
        arrays[f"{name}_params"] = critic.net.get_params()
        state = critic.optimizer.state()
        arrays[f"{name}_adam_m"] = state["m"]
        arrays[f"{name}_adam_v"] = state["v"]
        arrays[f"{name}_adam_t"] = np.array([state["t"]])
    if rng is not None:
        arrays["rng_json"] = np.frombuffer(
            json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path):
    """Returns (meta, policy, critics, rng_or_None)."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta_json"]).decode())
        if meta["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        policy = GaussianPolicy(meta["obs_dim"], meta["act_dim"], hidden=meta["hidden"])
        policy.set_params(data["policy_params"])
        critics = CriticSet(meta["obs_dim"], hidden=meta["hidden"])
        for name, critic in critics.networks().items():
            critic.net.set_params(data[f"{name}_params"])
            critic.optimizer.load_state({
                "m": data[f"{name}_adam_m"],
                "v": data[f"{name}_adam_v"],
                "t": int(data[f"{name}_adam_t"][0]),
            })
        rng = None
        if "rng_json" in data:
            rng = np.random.default_rng()
            rng.bit_generator.state = json.loads(bytes(data["rng_json"]).decode())
    return meta, policy, critics, rng
