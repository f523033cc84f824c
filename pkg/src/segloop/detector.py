"""Pluggable detector contract: builtin reference detector or an external
process speaking a newline-delimited JSON protocol over stdin/stdout.

Wire protocol (strictly sequential): requests are single-line JSON objects
``{"id": int, "cmd": "hello"|"train"|"infer"|"save"|"load"|"close",
"payload": {...}}``; responses are ``{"id": int, "ok": bool, "payload": ...}``
or ``{"id": int, "ok": false, "error": {"code": str, "message": str}}``.
Images travel by file path, masks as uncompressed RLE objects, and "save"
returns base64 state bytes. Any malformed line poisons the handle.
"""
from __future__ import annotations

import base64
import hashlib
import json
import shlex
import struct
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import Annotation, Detection, ImageRecord
from .errors import (
    EmptyJobError,
    HandleClosedError,
    NotTrainedError,
    ProtocolError,
    SerializationError,
    SpawnError,
    VersionError,
)
from .masks import RLEMask
from .refdetect import RefDetectorParams, ReferenceDetector

PROTOCOL_VERSION = 1
KIND_BUILTIN = "builtin"
KIND_EXTERNAL = "external"

_CONTAINER_MAGIC = b"SLST"
_ERROR_CODES = {
    "not_trained": NotTrainedError,
    "empty_job": EmptyJobError,
    "version": VersionError,
    "serialization": SerializationError,
}


@dataclass(frozen=True)
class TrainJob:
    """One training call: annotated images plus the epoch geometry.

    An epoch presents ``batch_size`` images per batch for ``steps_per_epoch``
    batches, images sampled from the pool with replacement, each presentation
    under a fresh augmentation drawn from the seeded stream.
    """

    items: tuple[tuple[ImageRecord, tuple[Annotation, ...]], ...]
    epochs: int
    batch_size: int = 2
    steps_per_epoch: int = 24
    seed: int = 0
    augmentations: frozenset[str] | None = None

    def __post_init__(self) -> None:
        items = tuple((rec, tuple(anns)) for rec, anns in self.items)
        object.__setattr__(self, "items", items)
        if self.epochs < 1:
            raise EmptyJobError(f"epochs must be >= 1, got {self.epochs}")
        if not items:
            raise EmptyJobError("training job has no images")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise EmptyJobError("batch_size and steps_per_epoch must be >= 1")
        supplied = {rec.id for rec, _ in items}
        for _, anns in items:
            for a in anns:
                if a.image_id not in supplied:
                    raise ValueError(f"annotation {a.id} not on a supplied image")

    @property
    def presentations(self) -> int:
        return self.epochs * self.steps_per_epoch * self.batch_size


@dataclass(frozen=True)
class DetectorStateBlob:
    """Opaque detector state with an integrity digest."""

    version: int
    data: bytes
    digest: str

    @classmethod
    def wrap(cls, version: int, data: bytes) -> "DetectorStateBlob":
        return cls(version=version, data=data, digest=hashlib.sha256(data).hexdigest())

    def verify(self) -> None:
        if hashlib.sha256(self.data).hexdigest() != self.digest:
            raise VersionError("state blob digest mismatch")

    def save(self, path: str | Path) -> None:
        digest_raw = bytes.fromhex(self.digest)
        header = _CONTAINER_MAGIC + struct.pack("<BI", 1, self.version) + digest_raw
        Path(path).write_bytes(header + struct.pack("<Q", len(self.data)) + self.data)

    @classmethod
    def load(cls, path: str | Path) -> "DetectorStateBlob":
        raw = Path(path).read_bytes()
        head = len(_CONTAINER_MAGIC) + struct.calcsize("<BI")
        if len(raw) < head + 32 + 8 or raw[: len(_CONTAINER_MAGIC)] != _CONTAINER_MAGIC:
            raise SerializationError(f"{path}: not a detector state file")
        container, version = struct.unpack_from("<BI", raw, len(_CONTAINER_MAGIC))
        if container != 1:
            raise VersionError(f"{path}: unsupported container version {container}")
        digest = raw[head : head + 32].hex()
        (size,) = struct.unpack_from("<Q", raw, head + 32)
        data = raw[head + 40 :]
        if len(data) != size:
            raise SerializationError(f"{path}: truncated state payload")
        blob = cls(version=version, data=data, digest=digest)
        blob.verify()
        return blob


class DetectorHandle:
    """Exclusive access to one detector instance (builtin or external)."""

    def __init__(self, kind: str, impl, seed: int) -> None:
        self.kind = kind
        self.seed = seed
        self._impl = impl
        self._closed = False

    def _check_open(self) -> None:
        if self._closed:
            raise HandleClosedError("detector handle already closed")

    @property
    def trained_steps(self) -> int:
        return self._impl.trained_steps

    def train(self, job: TrainJob) -> None:
        self._check_open()
        before = self.trained_steps
        self._impl.train(job)
        if self.trained_steps != before + job.presentations:
            raise ProtocolError(
                f"detector reported {self.trained_steps} steps, "
                f"expected {before + job.presentations}"
            )

    def infer(self, images: Sequence[ImageRecord]) -> list[Detection]:
        self._check_open()
        if self.trained_steps == 0:
            raise NotTrainedError("detector has not been trained")
        return self._impl.infer(images)

    def checkpoint(self) -> DetectorStateBlob:
        self._check_open()
        return self._impl.checkpoint()

    def close(self) -> None:
        if not self._closed:
            self._impl.close()
            self._closed = True

    def __enter__(self) -> "DetectorHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_detector(
    kind: str,
    pretrained: DetectorStateBlob | None = None,
    seed: int = 0,
    *,
    command: str | Sequence[str] | None = None,
    image_root: str | Path | None = None,
    params: RefDetectorParams | None = None,
) -> DetectorHandle:
    """Open a detector handle; with ``pretrained`` the detector restores to a
    behaviorally identical state, otherwise it starts untrained."""
    root = Path(image_root) if image_root is not None else None
    if kind == KIND_BUILTIN:
        impl = _BuiltinAdapter(pretrained, seed, root, params)
    elif kind == KIND_EXTERNAL:
        if not command:
            raise SpawnError("external detector needs a command line")
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        impl = _ExternalAdapter(argv, seed, root)
        if pretrained is not None:
            impl.load_blob(pretrained)
    else:
        raise ValueError(f"unknown detector kind {kind!r}")
    return DetectorHandle(kind, impl, seed)


class _BuiltinAdapter:
    def __init__(
        self,
        pretrained: DetectorStateBlob | None,
        seed: int,
        root: Path | None,
        params: RefDetectorParams | None,
    ) -> None:
        if pretrained is not None:
            pretrained.verify()
            self.detector = ReferenceDetector.from_bytes(
                pretrained.data, seed=seed, image_root=root
            )
        else:
            self.detector = ReferenceDetector(params=params, seed=seed, image_root=root)

    @property
    def trained_steps(self) -> int:
        return self.detector.trained_steps

    def train(self, job: TrainJob) -> None:
        self.detector.train(job)

    def infer(self, images: Sequence[ImageRecord]) -> list[Detection]:
        return self.detector.infer(images)

    def checkpoint(self) -> DetectorStateBlob:
        return DetectorStateBlob.wrap(1, self.detector.save_bytes())

    def close(self) -> None:
        pass


def _encode_image(record: ImageRecord, root: Path | None) -> dict:
    path = Path(record.file_path)
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    return {
        "id": record.id,
        "width": record.width,
        "height": record.height,
        "file_path": str(path),
    }


def _encode_rle(mask: RLEMask) -> dict:
    return {"size": [mask.height, mask.width], "counts": list(mask.counts)}


class _ExternalAdapter:
    """Client side of the wire protocol; requests are strictly sequential."""

    def __init__(self, argv: Sequence[str], seed: int, root: Path | None) -> None:
        self.root = root
        self.trained_steps = 0
        self._lock = threading.Lock()
        self._next_id = 0
        self._poisoned = False
        try:
            self._proc = subprocess.Popen(
                list(argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise SpawnError(f"cannot start {argv!r}: {exc}") from exc
        hello = self._request("hello", {})
        if hello.get("protocol") != PROTOCOL_VERSION:
            self._poison()
            raise ProtocolError(f"unsupported protocol {hello.get('protocol')!r}")
        self.name = str(hello.get("name", ""))

    def _poison(self) -> None:
        self._poisoned = True
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()

    def _request(self, cmd: str, payload: dict) -> dict:
        with self._lock:
            if self._poisoned:
                raise ProtocolError("detector handle is poisoned")
            self._next_id += 1
            request_id = self._next_id
            line = json.dumps({"id": request_id, "cmd": cmd, "payload": payload})
            try:
                assert self._proc.stdin is not None and self._proc.stdout is not None
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
                reply = self._proc.stdout.readline()
            except (OSError, ValueError) as exc:
                self._poison()
                raise ProtocolError(f"detector pipe failed: {exc}") from exc
            if not reply:
                self._poison()
                raise ProtocolError("detector closed its output stream")
            try:
                message = json.loads(reply)
            except json.JSONDecodeError as exc:
                self._poison()
                raise ProtocolError(f"malformed response line: {exc}") from exc
            if not isinstance(message, dict) or message.get("id") != request_id:
                self._poison()
                raise ProtocolError(f"response id mismatch: {message!r}")
            if not message.get("ok", False):
                error = message.get("error") or {}
                code = str(error.get("code", ""))
                text = str(error.get("message", "external detector error"))
                raise _ERROR_CODES.get(code, ProtocolError)(text)
            return message.get("payload") or {}

    def train(self, job: TrainJob) -> None:
        annotations = []
        for record, anns in job.items:
            for a in anns:
                annotations.append(
                    {
                        "image_id": a.image_id,
                        "category_id": a.category_id,
                        "segmentation": _encode_rle(a.mask),
                    }
                )
        payload = {
            "images": [_encode_image(rec, self.root) for rec, _ in job.items],
            "annotations": annotations,
            "epochs": job.epochs,
            "batch_size": job.batch_size,
            "steps_per_epoch": job.steps_per_epoch,
            "seed": job.seed,
            "augmentations": sorted(job.augmentations) if job.augmentations else None,
        }
        reply = self._request("train", payload)
        steps = reply.get("trained_steps")
        if not isinstance(steps, int) or steps < self.trained_steps:
            self._poison()
            raise ProtocolError(f"bad trained_steps in train response: {steps!r}")
        self.trained_steps = steps

    def infer(self, images: Sequence[ImageRecord]) -> list[Detection]:
        payload = {"images": [_encode_image(rec, self.root) for rec in images]}
        reply = self._request("infer", payload)
        detections = []
        try:
            for entry in reply["detections"]:
                seg = entry["segmentation"]
                detections.append(
                    Detection(
                        image_id=int(entry["image_id"]),
                        category_id=int(entry["category_id"]),
                        mask=RLEMask(
                            int(seg["size"][0]),
                            int(seg["size"][1]),
                            tuple(int(c) for c in seg["counts"]),
                        ),
                        confidence=float(entry["confidence"]),
                    )
                )
        except (KeyError, TypeError, ValueError) as exc:
            self._poison()
            raise ProtocolError(f"malformed detections payload: {exc}") from exc
        return detections

    def checkpoint(self) -> DetectorStateBlob:
        reply = self._request("save", {})
        try:
            data = base64.b64decode(reply["state"], validate=True)
            version = int(reply["version"])
        except (KeyError, TypeError, ValueError) as exc:
            self._poison()
            raise ProtocolError(f"malformed save payload: {exc}") from exc
        blob = DetectorStateBlob.wrap(version, data)
        # keep the client-side counter aligned with the serialized state
        steps = reply.get("trained_steps")
        if isinstance(steps, int):
            self.trained_steps = steps
        return blob

    def load_blob(self, blob: DetectorStateBlob) -> None:
        blob.verify()
        payload = {
            "version": blob.version,
            "state": base64.b64encode(blob.data).decode("ascii"),
        }
        reply = self._request("load", payload)
        steps = reply.get("trained_steps", 0)
        if not isinstance(steps, int) or steps < 0:
            self._poison()
            raise ProtocolError(f"bad trained_steps in load response: {steps!r}")
        self.trained_steps = steps

    def close(self) -> None:
        if not self._poisoned and self._proc.poll() is None:
            try:
                self._request("close", {})
            except ProtocolError:
                pass
        if self._proc.poll() is None:
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
