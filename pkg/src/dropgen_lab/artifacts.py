"""Run directories: atomic file writes and the run manifest."""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from pathlib import Path

from . import __version__

MANIFEST = "manifest.json"


def write_text_atomic(path, text):
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def json_safe(obj):
    """Replace non-finite floats by None and tuple keys by strings."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {(k if isinstance(k, str) else str(k)): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def write_json(path, doc):
    write_text_atomic(path, json.dumps(json_safe(doc), indent=2, sort_keys=True,
                                       allow_nan=False) + "\n")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    """Collects provenance during a run and writes ``manifest.json`` last."""

    def __init__(self, out_dir, command, config_hash=None, spec_hash=None, seed=None):
        self.out_dir = Path(out_dir)
        self.doc = {
            "format": "dropgen-lab/manifest",
            "command": command,
            "config_hash": config_hash,
            "spec_hash": spec_hash,
            "seed": seed,
            "code_version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "warnings": [],
        }

    def warn(self, message):
        self.doc["warnings"].append(message)

    def finish(self, status="ok"):
        self.doc["status"] = status
        self.doc["finished"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        files = []
        for p in sorted(self.out_dir.rglob("*")):
            if not p.is_file() or p.name == MANIFEST and p.parent == self.out_dir:
                continue
            if p.name.startswith(".") and p.name.endswith(".tmp"):
                continue
            rel = p.relative_to(self.out_dir).as_posix()
            files.append({"path": rel, "bytes": p.stat().st_size, "sha256": file_digest(p)})
        files.append({"path": MANIFEST, "bytes": None, "sha256": None})
        self.doc["files"] = files
        write_json(self.out_dir / MANIFEST, self.doc)
        return self.doc


def register_file(out_dir, path):
    """Add ``path`` to an existing manifest in ``out_dir`` (no-op without one)."""
    out_dir, path = Path(out_dir), Path(path)
    target = out_dir / MANIFEST
    if not target.exists():
        return False
    doc = json.loads(target.read_text())
    rel = path.relative_to(out_dir).as_posix()
    files = [f for f in doc.get("files", []) if f["path"] not in (rel, MANIFEST)]
    files.append({"path": rel, "bytes": path.stat().st_size, "sha256": file_digest(path)})
    files.sort(key=lambda f: f["path"])
    files.append({"path": MANIFEST, "bytes": None, "sha256": None})
    doc["files"] = files
    write_json(target, doc)
    return True
