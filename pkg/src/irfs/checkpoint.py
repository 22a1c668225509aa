"""Versioned weight archives with the network config embedded."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import torch

FORMAT = "irfs-checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass


def config_hash(cfg) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def weights_checksum(module: torch.nn.Module) -> str:
    """sha256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, cfg, model: torch.nn.Module, optimizer=None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": dataclasses.asdict(cfg),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path, kind: str | None = None) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except Exception as e:  # torch raises a zoo of types on corrupt archives
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an irfs checkpoint")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload


def load_into(path, kind: str, model: torch.nn.Module, cfg, optimizer=None) -> dict:
    """Load weights into ``model`` after checking the embedded config equals ``cfg``."""
    payload = read_checkpoint(path, kind)
    expected = json.loads(json.dumps(dataclasses.asdict(cfg), default=list))
    found = json.loads(json.dumps(payload["config"], default=list))
    if expected != found:
        diff = sorted(k for k in set(expected) | set(found) if expected.get(k) != found.get(k))
        raise CheckpointError(f"{path}: config mismatch in {diff}")
    try:
        model.load_state_dict(payload["state_dict"])
        if optimizer is not None and payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
    except (RuntimeError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: incompatible weights: {e}") from e
    return payload


def build_fusion_from_checkpoint(path):
    from .fusion import FSFNet, FusionNetConfig

    payload = read_checkpoint(path, "fusion")
    cfg = FusionNetConfig(**payload["config"])
    net = FSFNet(cfg)
    load_into(path, "fusion", net, cfg)
    return net.eval()


def build_sod_from_checkpoint(path):
    from .sod import FGC2Net, SodNetConfig

    payload = read_checkpoint(path, "sod")
    cfg = SodNetConfig(**payload["config"])
    net = FGC2Net(cfg)
    load_into(path, "sod", net, cfg)
    return net.eval()
