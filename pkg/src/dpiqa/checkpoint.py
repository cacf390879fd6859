"""Versioned checkpoint container for teacher and student bundles."""
from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Any, Optional

import torch

from .distill import StudentConfig, StudentModel
from .model import ModelConfig, TeacherModel

FORMAT = "dpiqa-checkpoint"
VERSION = 1


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(model, path: str | Path, extra: Optional[dict[str, Any]] = None) -> str:
    """Write parameters plus config snapshot; returns the file's sha256."""
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    # Serialise through a buffer so the archive prefix (and thus the hash)
    # does not depend on the destination file name.
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return file_hash(path)


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a dpiqa checkpoint")
    if payload["version"] > VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported ({VERSION})")
    state = payload["state_dict"]
    if payload["kind"] == "teacher":
        model = TeacherModel(ModelConfig.from_dict(payload["config"]), condition=state["base_condition"])
    elif payload["kind"] == "student":
        model = StudentModel(StudentConfig.from_dict(payload["config"]))
    else:
        raise ValueError(f"unknown checkpoint kind {payload['kind']!r}")
    model.load_state_dict(state)
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    meta["hash"] = file_hash(path)
    return model, meta
