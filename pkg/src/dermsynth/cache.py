"""Content-addressed artifact store: one directory per (stage, key)."""

from __future__ import annotations

import hashlib
import json
import shutil
import tempfile
from pathlib import Path

from filelock import FileLock


def content_key(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ArtifactCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, stage, key) -> Path:
        return self.root / stage / key

    def has(self, stage, key) -> bool:
        return (self.path(stage, key) / ".complete").exists()

    def build(self, stage, payload, builder):
        """Return the artifact directory for ``payload``, running ``builder(tmpdir)`` on a miss.

        Writers of the same key are serialized by a file lock; the build happens
        in a temporary directory that is renamed into place once finished.
        """
        key = content_key(payload)
        final = self.path(stage, key)
        final.parent.mkdir(parents=True, exist_ok=True)
        with FileLock(str(final) + ".lock"):
            if self.has(stage, key):
                return final, key
            tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{key}."))
            try:
                builder(tmp)
                (tmp / "key.json").write_text(json.dumps(payload, sort_keys=True, indent=2, default=str))
                (tmp / ".complete").write_text(key)
                if final.exists():
                    shutil.rmtree(final)
                tmp.rename(final)
            except BaseException:
                shutil.rmtree(tmp, ignore_errors=True)
                raise
        return final, key
