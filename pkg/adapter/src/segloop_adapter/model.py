"""Tiny trainable fallback model: a nearest-prototype pixel classifier.

Each category keeps a running mean RGB prototype learned from annotation
pixels; a background prototype absorbs everything outside the masks. At
inference a pixel belongs to the closest prototype, foreground components
become detections, and the confidence is the background-vs-category distance
ratio. Deliberately small: the point of this package is the wire protocol,
and this model is just enough to train, infer, and round-trip its state.

A heavier detector plugs in by replacing this class with one exposing the
same train/infer/to_payload/from_payload surface (see server.py).
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

STATE_VERSION = 1
MIN_COMPONENT_AREA = 30


class ModelError(Exception):
    """Domain error carrying a wire-protocol error code."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code


def _decode_rle(size, counts) -> np.ndarray:
    height, width = int(size[0]), int(size[1])
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values, np.asarray(counts, dtype=int)).astype(bool)
    if flat.size != height * width:
        raise ModelError("bad_request", f"RLE counts sum {flat.size} != {height * width}")
    return flat.reshape((height, width), order="F")


def _encode_rle(mask: np.ndarray) -> dict:
    flat = mask.ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(r) for r in runs]}


def _load_rgb(path: str) -> np.ndarray:
    with Image.open(Path(path)) as handle:
        return np.asarray(handle.convert("RGB"), dtype=float) / 255.0


class PrototypeModel:
    BACKGROUND = 0

    def __init__(self, seed: int = 0) -> None:
        self.seed = int(seed)
        self.trained_steps = 0
        self.counts: dict[int, int] = {}
        self.sums: dict[int, np.ndarray] = {}

    # -- training ---------------------------------------------------------

    def _accumulate(self, key: int, pixels: np.ndarray) -> None:
        if pixels.size == 0:
            return
        self.counts[key] = self.counts.get(key, 0) + pixels.shape[0]
        self.sums[key] = self.sums.get(key, np.zeros(3)) + pixels.sum(axis=0)

    def train(self, payload: dict) -> int:
        images = payload.get("images") or []
        epochs = int(payload.get("epochs", 0))
        batch_size = int(payload.get("batch_size", 2))
        steps = int(payload.get("steps_per_epoch", 24))
        if not images or epochs < 1 or batch_size < 1 or steps < 1:
            raise ModelError("empty_job", "training payload has no work")
        annotations = payload.get("annotations") or []
        by_image: dict[int, list] = {}
        for entry in annotations:
            by_image.setdefault(int(entry["image_id"]), []).append(entry)

        pool = []
        for record in images:
            anns = by_image.get(int(record["id"]), [])
            if not anns:
                continue
            rgb = _load_rgb(record["file_path"])
            masks = [
                (int(a["category_id"]),
                 _decode_rle(a["segmentation"]["size"], a["segmentation"]["counts"]))
                for a in anns
            ]
            pool.append((rgb, masks))
        if not pool:
            raise ModelError("empty_job", "no annotated images in training payload")

        rng = np.random.default_rng([self.seed, int(payload.get("seed", 0)) & 0x7FFFFFFF])
        for _ in range(epochs):
            for _ in range(steps):
                picks = rng.integers(0, len(pool), size=batch_size)
                for index in picks:
                    rgb, masks = pool[int(index)]
                    noisy = np.clip(rgb + rng.normal(0.0, 0.01, rgb.shape), 0.0, 1.0)
                    covered = np.zeros(rgb.shape[:2], dtype=bool)
                    for category, mask in masks:
                        self._accumulate(category, noisy[mask])
                        covered |= mask
                    self._accumulate(self.BACKGROUND, noisy[~covered])
                    self.trained_steps += 1
        return self.trained_steps

    # -- inference ---------------------------------------------------------

    def _prototypes(self) -> tuple[list[int], np.ndarray]:
        categories = sorted(k for k in self.counts if k != self.BACKGROUND)
        if not categories:
            raise ModelError("not_trained", "no category prototypes learned yet")
        rows = [self.sums[c] / self.counts[c] for c in categories]
        return categories, np.asarray(rows)

    def infer(self, payload: dict) -> list[dict]:
        if self.trained_steps == 0:
            raise ModelError("not_trained", "model has not been trained")
        categories, prototypes = self._prototypes()
        if self.BACKGROUND in self.counts:
            background = self.sums[self.BACKGROUND] / self.counts[self.BACKGROUND]
        else:
            background = np.full(3, 0.5)
        detections = []
        for record in payload.get("images") or []:
            rgb = _load_rgb(record["file_path"])
            cat_dist = np.linalg.norm(
                rgb[:, :, None, :] - prototypes[None, None, :, :], axis=-1
            )
            nearest = cat_dist.argmin(axis=2)
            best = cat_dist.min(axis=2)
            bg_dist = np.linalg.norm(rgb - background, axis=-1)
            foreground = best < bg_dist
            labels, count = ndimage.label(foreground, structure=np.ones((3, 3), dtype=bool))
            for component in range(1, count + 1):
                member = labels == component
                if int(member.sum()) < MIN_COMPONENT_AREA:
                    continue
                votes = np.bincount(nearest[member], minlength=len(categories))
                winner = int(votes.argmax())
                ratio = bg_dist[member] / (best[member] + bg_dist[member] + 1e-12)
                detections.append(
                    {
                        "image_id": int(record["id"]),
                        "category_id": categories[winner],
                        "segmentation": _encode_rle(member),
                        "confidence": float(np.clip(ratio.mean(), 0.0, 1.0)),
                    }
                )
        return detections

    # -- state -------------------------------------------------------------

    def to_payload(self) -> dict:
        state = {
            "version": STATE_VERSION,
            "seed": self.seed,
            "trained_steps": self.trained_steps,
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "sums": {str(k): list(map(float, v)) for k, v in sorted(self.sums.items())},
        }
        blob = json.dumps(state, sort_keys=True).encode("utf-8")
        return {
            "version": STATE_VERSION,
            "state": base64.b64encode(blob).decode("ascii"),
            "trained_steps": self.trained_steps,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PrototypeModel":
        if int(payload.get("version", -1)) != STATE_VERSION:
            raise ModelError("version", f"unsupported state version {payload.get('version')}")
        try:
            state = json.loads(base64.b64decode(payload["state"]))
        except (KeyError, ValueError) as exc:
            raise ModelError("serialization", f"unreadable state payload: {exc}") from exc
        model = cls(seed=int(state.get("seed", 0)))
        model.trained_steps = int(state["trained_steps"])
        model.counts = {int(k): int(v) for k, v in state["counts"].items()}
        model.sums = {int(k): np.asarray(v, dtype=float) for k, v in state["sums"].items()}
        return model
