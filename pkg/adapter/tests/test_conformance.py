"""Protocol conformance of the example adapter, driven by the primary harness
(the segloop package) plus raw-pipe checks of the wire format."""
import json
import subprocess
import sys

import pytest

segloop = pytest.importorskip("segloop", reason="primary package required to drive the adapter")

from segloop.conformance import conformance_dataset, run_conformance
from segloop.detector import TrainJob, open_detector
from segloop.errors import NotTrainedError
from segloop.loop import RunConfig, run_loop
from segloop.synth import OverlapMode, coffee_analog, generate_experiment

ADAPTER = [sys.executable, "-m", "segloop_adapter", "--seed", "5"]


def test_full_conformance_script(tmp_path):
    summary = run_conformance(ADAPTER, tmp_path)
    assert summary["name"] == "prototype-adapter"
    assert summary["trained_steps"] == 8


def test_raw_handshake_and_close():
    proc = subprocess.Popen(
        ADAPTER, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
    )
    try:
        proc.stdin.write(json.dumps({"id": 1, "cmd": "hello", "payload": {}}) + "\n")
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        assert reply == {
            "id": 1,
            "ok": True,
            "payload": {"protocol": 1, "name": "prototype-adapter"},
        }
        proc.stdin.write(json.dumps({"id": 2, "cmd": "close", "payload": {}}) + "\n")
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        assert reply["ok"] and reply["id"] == 2
        assert proc.wait(timeout=5) == 0
    finally:
        if proc.poll() is None:
            proc.kill()


def test_infer_before_train_error_payload():
    proc = subprocess.Popen(
        ADAPTER, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
    )
    try:
        proc.stdin.write(json.dumps({"id": 1, "cmd": "infer", "payload": {"images": []}}) + "\n")
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        assert reply["ok"] is False
        assert reply["error"]["code"] == "not_trained"
    finally:
        proc.kill()


def test_malformed_request_answered_not_fatal():
    proc = subprocess.Popen(
        ADAPTER, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
    )
    try:
        proc.stdin.write('{"id": 3, "cmd": "train", "payload": {"images": 17}}\n')
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        assert reply["ok"] is False and reply["id"] == 3
        # the server survives and still answers the next request
        proc.stdin.write(json.dumps({"id": 4, "cmd": "hello", "payload": {}}) + "\n")
        proc.stdin.flush()
        reply = json.loads(proc.stdout.readline())
        assert reply["ok"] and reply["id"] == 4
    finally:
        proc.kill()


def test_stream_closure_exits_cleanly():
    proc = subprocess.Popen(
        ADAPTER, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
    )
    proc.stdin.close()
    assert proc.wait(timeout=5) == 0


def test_not_trained_via_client(tmp_path):
    dataset = conformance_dataset(tmp_path)
    handle = open_detector("external", command=ADAPTER, image_root=dataset.images_root)
    try:
        with pytest.raises(NotTrainedError):
            handle.infer(list(dataset.images))
    finally:
        handle.close()


def test_deterministic_given_seed(tmp_path):
    dataset = conformance_dataset(tmp_path)
    images = list(dataset.images)
    items = tuple((im, dataset.annotations_for(im.id)) for im in images)
    job = TrainJob(items=items, epochs=1, batch_size=2, steps_per_epoch=4, seed=11)
    outputs = []
    for _ in range(2):
        handle = open_detector("external", command=ADAPTER, image_root=dataset.images_root)
        try:
            handle.train(job)
            outputs.append((handle.infer(images), handle.checkpoint().digest))
        finally:
            handle.close()
    assert outputs[0] == outputs[1]


def test_adapter_drives_full_loop(tmp_path):
    """The loop runs end to end with the adapter in the detector seat."""
    spec = coffee_analog(
        seed=1, size=64, instances_per_image=5, bootstrap_images=2,
        bootstrap_annotations=3, training_images=3,
        test_modes=(OverlapMode.UNCONNECTED,),
    )
    dataset = generate_experiment(spec, tmp_path / "data")
    config = RunConfig(
        threshold=0.25,
        epochs_per_iteration=1,
        n_iterations=1,
        seed=1,
        detector="external",
        detector_command=" ".join(ADAPTER),
    )
    records = run_loop(config, dataset, tmp_path / "run")
    assert len(records) == 2
    assert records[0].metrics is not None
    assert (tmp_path / "run" / "metrics.csv").exists()
