"""Model checkpoints as a single ``.npz`` archive.

Layout (format version 1):

``model/<name>``
    every entry of the model's ``state_dict`` as an array, keyed by module path.
``optim/<param index>/<slot>``
    Adam state (``step``, ``exp_avg``, ``exp_avg_sq``) when saved with an optimizer.
``__meta__``
    UTF-8 JSON (stored as a uint8 array) with ``format_version``,
    ``encoder`` (encoder_id, output_channels, downsampling_stride),
    ``input_resolution``, ``use_covisibility``, ``epochs_completed``,
    ``optimizer_param_groups`` and free-form ``train_config``.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .network import EncoderConfig, ScaleNet

FORMAT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: ScaleNet,
    optimizer: torch.optim.Optimizer | None = None,
    epochs_completed: int = 0,
    train_config: dict | None = None,
) -> None:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    groups = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, slots in state["state"].items():
            for slot, value in slots.items():
                arrays[f"optim/{idx}/{slot}"] = torch.as_tensor(value).cpu().numpy()
        groups = state["param_groups"]
    meta = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "encoder": asdict(model.encoder_config),
        "input_resolution": model.input_resolution,
        "use_covisibility": model.use_covisibility,
        "epochs_completed": epochs_completed,
        "optimizer_param_groups": groups,
        "train_config": train_config or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32):
    """Return ``(model, meta, optimizer_state_dict_or_None)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        model = ScaleNet(
            EncoderConfig(**meta["encoder"]),
            input_resolution=meta["input_resolution"],
            use_covisibility=meta["use_covisibility"],
            pretrained=False,
        )
        state = {k[len("model/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("model/")}
        model.load_state_dict(state)
        model.to(dtype)
        optim_state = None
        if meta.get("optimizer_param_groups") is not None:
            slots: dict[int, dict] = {}
            for k in data.files:
                if k.startswith("optim/"):
                    _, idx, slot = k.split("/")
                    slots.setdefault(int(idx), {})[slot] = torch.from_numpy(data[k].copy())
            optim_state = {"state": slots, "param_groups": meta["optimizer_param_groups"]}
    return model, meta, optim_state
