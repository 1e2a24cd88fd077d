"""Stage checkpoints: base weights, adapter stacks, config hash and generator state.

Files are ``.npz`` archives holding the arrays plus one JSON header string.
The header records a format version, the config digest, the stage index,
the training logs so far and a SHA-256 over every array, so truncated or
edited files fail to load instead of restoring partial state.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterStack, FrozenAdapter, LoraAdapter
from .errors import CheckpointError
from .model import SITES, ToyRecModel, stage_rng

VERSION = 1


@dataclass
class Checkpoint:
    model: ToyRecModel
    stacks: dict
    stage: int
    config_hash: str
    logs: list
    rng_state: dict


def _arrays(model, stacks):
    out = {name: w for name, w in model.base_params()}
    for s in SITES:
        st = stacks[s]
        out[f"{s}.live.A"] = st.live.A
        out[f"{s}.live.B"] = st.live.B
        for i, f in enumerate(st.frozen):
            out[f"{s}.frozen.{i}.A_hat"] = f.A_hat
            out[f"{s}.frozen.{i}.B_hat"] = f.B_hat
            out[f"{s}.frozen.{i}.alpha"] = np.array(f.alpha)
    return out


def _digest(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_checkpoint(path, model, stacks, config, stage, logs=(), rng=None):
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _arrays(model, stacks)
    rng = rng or stage_rng(config.seed, stage + 1)
    header = {
        "version": VERSION,
        "config_hash": config.digest(),
        "stage": int(stage),
        "policy": stacks[SITES[0]].policy,
        "train_A": {s: bool(stacks[s].live.train_A) for s in SITES},
        "n_frozen": {s: len(stacks[s].frozen) for s in SITES},
        "n_out": model.L,
        "logs": list(logs),
        "rng_state": rng.bit_generator.state,
        "checksum": _digest(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, default=_json_default)), **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


def load_checkpoint(path, config=None) -> Checkpoint:
    """Restore a checkpoint; ``config`` (if given) must hash to the stored digest."""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except Exception as exc:   # zip, json and key errors all mean an unusable file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} != {VERSION}")
    if _digest(arrays) != header.get("checksum"):
        raise CheckpointError(f"checksum mismatch in {path}")
    if config is not None and config.digest() != header["config_hash"]:
        raise CheckpointError(f"config hash mismatch: checkpoint {header['config_hash']}, "
                              f"current {config.digest()}")
    try:
        model = ToyRecModel(arrays["base.embed"], arrays["base.W_enc"], arrays["base.W_dec"],
                            [arrays[f"base.W_out.{j}"] for j in range(header["n_out"])])
        stacks = {}
        for s in SITES:
            live = LoraAdapter(s, arrays[f"{s}.live.A"], arrays[f"{s}.live.B"],
                               header["train_A"][s])
            frozen = [FrozenAdapter(arrays[f"{s}.frozen.{i}.A_hat"], arrays[f"{s}.frozen.{i}.B_hat"],
                                    float(arrays[f"{s}.frozen.{i}.alpha"]))
                      for i in range(header["n_frozen"][s])]
            stacks[s] = AdapterStack(s, header["policy"], live, frozen)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"incomplete checkpoint {path}: {exc}") from exc
    return Checkpoint(model, stacks, header["stage"], header["config_hash"], header["logs"],
                      header["rng_state"])
