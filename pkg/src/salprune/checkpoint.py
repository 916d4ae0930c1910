"""Self-describing checkpoint containers with content hashes.

Every stage writes a container holding its tensors, its config, the seed it
ran under, and the content hashes of the upstream checkpoints it was built
from. Downstream stages verify the chain before running.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch


class CheckpointError(RuntimeError):
    """Missing, corrupt, or mismatched checkpoint."""


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def state_hash(state: Mapping[str, torch.Tensor], extra: Mapping | None = None) -> str:
    """Order-independent sha256 over tensor names, dtypes, shapes, and bytes."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    if extra is not None:
        h.update(_canonical_json(extra))
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """Checksum over all parameters and buffers of a module."""
    return state_hash(dict(module.state_dict()))


def save_checkpoint(
    path: str | Path,
    kind: str,
    state: Mapping[str, torch.Tensor],
    config: Mapping | None = None,
    seed: int | None = None,
    upstream: Mapping[str, str] | None = None,
    meta: Mapping | None = None,
) -> str:
    """Write a checkpoint container; returns its content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = dict(config or {})
    upstream = dict(upstream or {})
    meta = dict(meta or {})
    content = state_hash(state, {"kind": kind, "config": config, "seed": seed,
                                 "upstream": upstream, "meta": meta})
    torch.save(
        {
            "format": "salprune-checkpoint-v1",
            "kind": kind,
            "state": {k: v.detach().cpu() if torch.is_tensor(v) else v for k, v in state.items()},
            "config": config,
            "seed": seed,
            "upstream": upstream,
            "meta": meta,
            "content_hash": content,
        },
        path,
    )
    return content


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    """Load and verify a checkpoint container."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - report any unpickling failure
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != "salprune-checkpoint-v1":
        raise CheckpointError(f"{path} is not a salprune checkpoint")
    recomputed = state_hash(
        blob["state"],
        {"kind": blob["kind"], "config": blob["config"], "seed": blob["seed"],
         "upstream": blob["upstream"], "meta": blob["meta"]},
    )
    if recomputed != blob["content_hash"]:
        raise CheckpointError(f"{path} is corrupt: content hash mismatch")
    if expect_kind is not None and blob["kind"] != expect_kind:
        raise CheckpointError(
            f"{path} holds a '{blob['kind']}' checkpoint, expected '{expect_kind}'"
        )
    return blob


def require_upstream(blob: Mapping, name: str, expected_hash: str, path: str = "") -> None:
    """Fail with a precise diagnostic when a hash chain link does not match."""
    got = blob.get("upstream", {}).get(name)
    if got != expected_hash:
        raise CheckpointError(
            f"checkpoint {path or blob.get('kind')} was built against {name} "
            f"{got}, but the supplied {name} hashes to {expected_hash}"
        )
