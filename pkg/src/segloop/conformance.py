"""Conformance harness for external detectors.

Drives a candidate adapter through the full protocol surface —
hello, train, infer, save, load, close — and checks save/load behavioral
identity bit-for-bit. Used by the detector tests and by adapter packages to
prove they plug in cleanly.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .data import AnnotatedDataset
from .detector import TrainJob, open_detector
from .errors import NotTrainedError, ProtocolError
from .synth import GRAIN, GRAIN_APPEARANCE, SceneSpec, generate_fully_annotated


def conformance_dataset(workdir: str | Path, seed: int = 7) -> AnnotatedDataset:
    """Two small fully-annotated scenes written under ``workdir``."""
    scene = SceneSpec(
        width=64,
        height=64,
        n_instances={GRAIN.id: 4},
        appearance={GRAIN.id: GRAIN_APPEARANCE},
    )
    return generate_fully_annotated((GRAIN,), scene, 2, workdir, seed=seed)


def run_conformance(command: str | Sequence[str], workdir: str | Path) -> dict:
    """Run the conformance script against ``command``; raises on any failure.

    Returns a small report: adapter name, detection count, trained steps.
    """
    dataset = conformance_dataset(workdir)
    images = list(dataset.images)
    items = tuple((im, dataset.annotations_for(im.id)) for im in images)
    job = TrainJob(items=items, epochs=1, batch_size=2, steps_per_epoch=4, seed=11)

    # a fresh adapter must refuse inference before any training
    probe = open_detector("external", command=command, image_root=dataset.images_root, seed=3)
    try:
        try:
            probe.infer(images)
        except NotTrainedError:
            pass
        else:
            raise ProtocolError("adapter served inference before any training")
    finally:
        probe.close()

    handle = open_detector("external", command=command, image_root=dataset.images_root, seed=3)
    try:
        handle.train(job)
        if handle.trained_steps != job.presentations:
            raise ProtocolError(
                f"adapter counted {handle.trained_steps} steps, expected {job.presentations}"
            )
        first = handle.infer(images)
        blob = handle.checkpoint()
        again = handle.infer(images)
        if first != again:
            raise ProtocolError("inference is not deterministic on a fixed state")
        name = handle._impl.name  # handshake name recorded by the client
    finally:
        handle.close()

    restored = open_detector(
        "external", command=command, image_root=dataset.images_root, seed=3, pretrained=blob
    )
    try:
        replay = restored.infer(images)
        if replay != first:
            raise ProtocolError("save/load round trip changed inference output")
        second_blob = restored.checkpoint()
        if second_blob.digest != blob.digest:
            raise ProtocolError("save -> load -> save changed the state digest")
    finally:
        restored.close()

    return {
        "name": name,
        "detections": len(first),
        "trained_steps": job.presentations,
    }
