"""Self-describing checkpoint container.

Layout: ``b"HLSF"``, a little-endian uint32 header length, a UTF-8 JSON
header with sorted keys, then the concatenated little-endian float32 arrays
listed in ``header["params"]`` as ``[name, shape, offset, nbytes]``.

Parameter names are the torch ``state_dict`` names of the forecaster
(``history_encoder.lstm.weight_ih_l0``, ``decoder.cell.bias_hh`` ...), the
discriminator under ``disc.``, and Adam moments under
``opt.<group>.<param name>.exp_avg`` / ``.exp_avg_sq``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from hlsf.config import ModelConfig, TrainConfig
from hlsf.errors import HLSFError

MAGIC = b"HLSF"
FORMAT_VERSION = 1


def encode(header: dict, arrays: dict) -> bytes:
    params, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        raw = a.tobytes()
        params.append([name, list(a.shape), offset, len(raw)])
        chunks.append(raw)
        offset += len(raw)
    head = dict(header, format_version=FORMAT_VERSION, params=params)
    hb = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict, dict]:
    if blob[:4] != MAGIC:
        raise HLSFError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8: 8 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise HLSFError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 8 + n
    arrays = {}
    for name, shape, offset, nbytes in header["params"]:
        raw = blob[base + offset: base + offset + nbytes]
        if len(raw) != nbytes:
            raise HLSFError(f"truncated checkpoint at {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return header, arrays


def _named_params(model, disc):
    named = dict(model.named_parameters())
    if disc is not None:
        named.update({f"disc.{k}": v for k, v in disc.named_parameters()})
    return named


def collect(model, disc=None, optimizers=(), extra: dict | None = None,
            train_cfg: TrainConfig | None = None, recipe: str | None = None) -> tuple[dict, dict]:
    """Header and arrays for the current model/optimizer state."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if disc is not None:
        arrays.update({f"disc.{k}": v.detach().cpu().numpy() for k, v in disc.state_dict().items()})
    names = {id(p): n for n, p in _named_params(model, disc).items()}
    opt_steps = {}
    for gi, opt in enumerate(optimizers):
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if not st:
                    continue
                key = f"opt.{gi}.{names[id(p)]}"
                arrays[f"{key}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
                arrays[f"{key}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
                opt_steps[key] = int(st["step"])
    header = {
        "model_config": dataclasses.asdict(model.cfg),
        "seed": model.cfg.seed,
        "step": int((extra or {}).get("step", 0)),
        "state": dict(extra or {}, opt_steps=opt_steps),
    }
    if train_cfg is not None:
        header["train_config"] = dataclasses.asdict(train_cfg)
    if recipe is not None:
        header["recipe"] = recipe
    return header, arrays


def save(path, model, disc=None, optimizers=(), extra=None, train_cfg=None, recipe=None):
    header, arrays = collect(model, disc, optimizers, extra, train_cfg, recipe)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(header, arrays))
    tmp.replace(path)


def read(path) -> tuple[dict, dict]:
    return decode(Path(path).read_bytes())


def restore(header, arrays, model, disc=None, optimizers=()):
    """Load parameters and optimizer moments in place."""
    dtype = next(model.parameters()).dtype

    def sd(prefix, module):
        own = module.state_dict()
        out = {}
        for k in own:
            name = prefix + k
            if name not in arrays:
                raise HLSFError(f"checkpoint lacks {name}")
            out[k] = torch.as_tensor(arrays[name]).to(dtype)
        return out

    model.load_state_dict(sd("", model))
    if disc is not None:
        disc.load_state_dict(sd("disc.", disc))
    steps = header.get("state", {}).get("opt_steps", {})
    named = _named_params(model, disc)
    for gi, opt in enumerate(optimizers):
        for group in opt.param_groups:
            for p in group["params"]:
                name = next(n for n, q in named.items() if q is p)
                key = f"opt.{gi}.{name}"
                if key not in steps:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(steps[key])),
                    "exp_avg": torch.as_tensor(arrays[f"{key}.exp_avg"]).to(dtype).clone(),
                    "exp_avg_sq": torch.as_tensor(arrays[f"{key}.exp_avg_sq"]).to(dtype).clone(),
                }


def load_model(path):
    """(model, discriminator, header) rebuilt from a checkpoint file."""
    from hlsf.model import build_model

    header, arrays = read(path)
    cfg = ModelConfig(**header["model_config"])
    model, disc = build_model(cfg)
    restore(header, arrays, model, disc)
    model.eval()
    return model, disc, header
