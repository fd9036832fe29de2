"""Content-addressed store for everything attackers hand us."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time

from .model import CapturedArtifact, format_ts, now_ms


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ArtifactStore:
    """Blobs named by their SHA-256 digest plus a JSON index of origins.

    With ``root=None`` blobs live in memory, which is what unit tests and the
    web trap's dry-run mode use.  Identical content is stored once; every
    capture still gets its own origin entry in the index.
    """

    INDEX = "index.json"

    def __init__(self, root=None, clock=time.time):
        self.root = os.fspath(root) if root is not None else None
        self.clock = clock
        self._lock = threading.Lock()
        self._blobs: dict[str, bytes] = {}
        self.index: dict[str, dict] = {}
        if self.root is not None:
            os.makedirs(self.root, exist_ok=True)
            path = os.path.join(self.root, self.INDEX)
            if os.path.exists(path):
                with open(path, encoding="utf-8") as fh:
                    self.index = json.load(fh)

    def _blob_path(self, digest: str) -> str:
        return os.path.join(self.root, digest)

    def _save_index(self):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".index-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.index, fh, indent=1, sort_keys=True)
        os.replace(tmp, os.path.join(self.root, self.INDEX))

    def put(self, data: bytes, origin: dict, session_id: str | None = None) -> CapturedArtifact:
        data = bytes(data)
        digest = sha256_hex(data)
        seen = now_ms(self.clock)
        with self._lock:
            entry = self.index.get(digest)
            if entry is None:
                if self.root is None:
                    self._blobs[digest] = data
                else:
                    fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".blob-")
                    with os.fdopen(fd, "wb") as fh:
                        fh.write(data)
                    os.replace(tmp, self._blob_path(digest))
                entry = {"size": len(data), "first_seen": format_ts(seen), "references": []}
                self.index[digest] = entry
            entry["references"].append({"origin": dict(origin), "session": session_id,
                                         "seen": format_ts(seen)})
            if self.root is not None:
                self._save_index()
        return CapturedArtifact(digest=digest, size_bytes=len(data), origin=dict(origin),
                                first_seen=seen, session_id=session_id)

    def get(self, digest: str) -> bytes:
        with self._lock:
            if digest not in self.index:
                raise KeyError(digest)
            if self.root is None:
                return self._blobs[digest]
        with open(self._blob_path(digest), "rb") as fh:
            return fh.read()

    def verify(self, digest: str) -> bool:
        try:
            return sha256_hex(self.get(digest)) == digest
        except (KeyError, FileNotFoundError):
            return False

    def references(self, digest: str) -> list[dict]:
        with self._lock:
            return list(self.index.get(digest, {}).get("references", []))

    def __contains__(self, digest) -> bool:
        return digest in self.index

    def __len__(self):
        return len(self.index)
