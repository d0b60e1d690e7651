"""Checkpoint files: a JSON manifest followed by tensor payloads.

Layout: magic ``ADCK``, u32 version, u64 manifest length, UTF-8 JSON
manifest (config, ordered parameter names, trainability, LHN sites), then
one record per tensor in the shared binary tensor format.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .lm import LmConfig, LmParams
from .model import ModelConfig, Seq2SeqParams

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"ADCK"
_VERSION = 1


def _manifest_for(params) -> dict:
    if isinstance(params, Seq2SeqParams):
        kind = "seq2seq"
        extra = {"lhn_sites": list(params.lhn_sites())}
    elif isinstance(params, LmParams):
        kind = "lm"
        extra = {}
    else:
        raise ConfigurationError(f"cannot checkpoint object of type {type(params).__name__}")
    return {
        "kind": kind,
        "config": asdict(params.config),
        "tensors": list(params.tensors.keys()),
        "trainable": {n: t.requires_grad for n, t in params.tensors.items()},
        **extra,
    }


def save_checkpoint(params, path: str) -> None:
    manifest = json.dumps(_manifest_for(params), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for tensor in params.tensors.values():
            ad.write_tensor(fh, tensor.values)


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        tensors = {}
        for name in manifest["tensors"]:
            tensors[name] = Tensor(
                ad.read_tensor(fh), requires_grad=manifest["trainable"][name]
            )
    if manifest["kind"] == "seq2seq":
        return Seq2SeqParams(ModelConfig(**manifest["config"]), tensors)
    if manifest["kind"] == "lm":
        return LmParams(LmConfig(**manifest["config"]), tensors)
    raise ConfigurationError(f"unknown checkpoint kind {manifest['kind']!r}")
