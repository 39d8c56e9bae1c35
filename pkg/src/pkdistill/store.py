"""Content-addressed artifact cache.

Training stages are pure functions of their inputs, so their outputs are keyed
by a digest of those inputs and written once. The harness uses a store to share
teachers and pretrained students across conditions; the CLI uses a read-only
view to insist that upstream commands already ran.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Callable

from .nn.checkpoint import Checkpoint


class MissingArtifact(FileNotFoundError):
    pass


def digest(*parts) -> str:
    text = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def derive_seed(seed: int, *salt) -> int:
    """Independent 32-bit seed for a named sub-stage of a run."""
    return int(digest("seed", seed, *salt)[:8], 16)


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class ArtifactStore:
    """Get-or-build checkpoints and JSON documents under ``root/<stage>/<key>``.

    With ``root=None`` artifacts live only in memory. With ``readonly=True``
    a missing artifact raises :class:`MissingArtifact` naming its path
    instead of being built.
    """

    def __init__(self, root=None, readonly: bool = False):
        self.root = Path(root) if root is not None else None
        self.readonly = readonly
        self._memo: dict[tuple, object] = {}

    def view(self, readonly: bool) -> "ArtifactStore":
        other = ArtifactStore(self.root, readonly)
        other._memo = self._memo
        return other

    def path(self, stage: str, key: str, name: str) -> Path | None:
        return None if self.root is None else self.root / stage / key / name

    def _missing(self, stage, key, name):
        where = self.path(stage, key, name)
        raise MissingArtifact(f"missing {stage} artifact: {where if where else stage + '/' + key + '/' + name}")

    def memo(self, key: tuple, build: Callable[[], object]):
        """Process-local value cache shared by every view of this store."""
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    def checkpoints(self, stage: str, key: str, names: list[str],
                    build: Callable[[], list[Checkpoint]]) -> list[Checkpoint]:
        memo = (stage, key, tuple(names))
        if memo in self._memo:
            return self._memo[memo]  # type: ignore[return-value]
        paths = [self.path(stage, key, n) for n in names]
        if paths[0] is not None and all(p.exists() for p in paths):
            out = [Checkpoint.load(p) for p in paths]
        elif self.readonly:
            missing = next((n for n, p in zip(names, paths) if p is None or not p.exists()), names[0])
            self._missing(stage, key, missing)
        else:
            out = build()
            if paths[0] is not None:
                for ck, p in zip(out, paths):
                    atomic_write(p, ck.to_bytes())
        self._memo[memo] = out
        return out

    def checkpoint(self, stage: str, key: str, name: str, build: Callable[[], Checkpoint]) -> Checkpoint:
        return self.checkpoints(stage, key, [name], lambda: [build()])[0]

    def document(self, stage: str, key: str, name: str, build: Callable[[], object],
                 encode=None, decode=None):
        """JSON (or custom-encoded text) artifact."""
        encode = encode or (lambda obj: json.dumps(obj, sort_keys=True, indent=1) + "\n")
        decode = decode or json.loads
        memo = (stage, key, name)
        if memo in self._memo:
            return self._memo[memo]
        p = self.path(stage, key, name)
        if p is not None and p.exists():
            obj = decode(p.read_text(encoding="utf-8"))
        elif self.readonly:
            self._missing(stage, key, name)
        else:
            obj = build()
            if p is not None:
                atomic_write(p, encode(obj).encode("utf-8"))
        self._memo[memo] = obj
        return obj
