"""Reward-record files and the output collector that writes run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import threading
import time
from pathlib import Path

from . import __version__
from .calibration import RewardRecord
from .errors import InfAlignError


class RecordFormatError(InfAlignError, ValueError):
    """A reward-record line could not be parsed."""


class OutputError(InfAlignError, OSError):
    """An output file could not be written."""


REQUIRED_FIELDS = ("prompt_id", "response_id", "reward")


def read_records(path: str | Path) -> list[tuple[dict, RewardRecord]]:
    """Parse a line-delimited JSON reward file.

    Returns each raw object alongside its validated record so that extra
    fields survive a round trip.  Blank lines are skipped.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise RecordFormatError(f"{path}:{lineno}: expected an object")
            missing = [k for k in REQUIRED_FIELDS if k not in obj]
            if missing:
                raise RecordFormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            reward = obj["reward"]
            if isinstance(reward, bool) or not isinstance(reward, (int, float)):
                raise RecordFormatError(f"{path}:{lineno}: reward must be a number")
            if not math.isfinite(reward):
                raise RecordFormatError(f"{path}:{lineno}: reward must be finite")
            rec = RewardRecord(str(obj["prompt_id"]), str(obj["response_id"]), float(reward))
            out.append((obj, rec))
    return out


def format_records(objects) -> str:
    return "".join(json.dumps(o, ensure_ascii=False) + "\n" for o in objects)


def format_csv(header, rows) -> str:
    """CSV text; floats are written with ``repr`` so they round-trip exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for fully byte-identical manifests
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(pinned) if pinned else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


class OutputCollector:
    """Single writer for a run's files.

    Used as a context manager: on success a ``manifest.json`` listing a
    sha256 for every file is written; on any exception the files written so
    far are removed, so a failed run leaves nothing unmanifested behind.
    """

    MANIFEST = "manifest.json"

    def __init__(self, out_dir: str | Path, command: str, config: dict, seed: int | None = None):
        self.out_dir = Path(out_dir)
        self.command = command
        self.config = config
        self.seed = seed
        self.started = _timestamp()
        self._written: dict[str, str] = {}
        self._lock = threading.Lock()

    def __enter__(self):
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputError(f"cannot create output directory {self.out_dir}: {exc}") from None
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self._write_manifest()
        else:
            self.discard()
        return False

    def write_bytes(self, name: str, data: bytes) -> Path:
        path = self.out_dir / name
        with self._lock:
            if name in self._written:
                raise OutputError(f"output {name} written twice")
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
            except OSError as exc:
                raise OutputError(f"cannot write {path}: {exc}") from None
            self._written[name] = hashlib.sha256(data).hexdigest()
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    @property
    def outputs(self) -> dict[str, str]:
        return dict(self._written)

    def discard(self) -> None:
        with self._lock:
            for name in self._written:
                try:
                    (self.out_dir / name).unlink()
                except FileNotFoundError:
                    pass
            self._written.clear()

    def _write_manifest(self) -> None:
        manifest = {
            "tool": "infalign",
            "version": __version__,
            "command": self.command,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "started": self.started,
            "finished": _timestamp(),
            "outputs": dict(sorted(self._written.items())),
        }
        text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        try:
            (self.out_dir / self.MANIFEST).write_text(text, encoding="utf-8")
        except OSError as exc:
            self.discard()
            raise OutputError(f"cannot write manifest: {exc}") from None
