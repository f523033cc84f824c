"""Wire-protocol server: newline-delimited JSON over stdin/stdout.

Requests: ``{"id": int, "cmd": "hello"|"train"|"infer"|"save"|"load"|"close",
"payload": {...}}``. Responses: ``{"id": int, "ok": true, "payload": ...}`` or
``{"id": int, "ok": false, "error": {"code": str, "message": str}}``.
Requests are handled strictly sequentially; a closed input stream ends the
process cleanly.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import IO

from .model import ModelError, PrototypeModel

PROTOCOL_VERSION = 1
ADAPTER_NAME = "prototype-adapter"


def _respond(stream: IO[str], message: dict) -> None:
    stream.write(json.dumps(message) + "\n")
    stream.flush()


def serve_adapter(stdin: IO[str], stdout: IO[str], seed: int = 0) -> None:
    """Serve requests until "close" or end of input."""
    model = PrototypeModel(seed=seed)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        request_id = -1
        try:
            request = json.loads(line)
            request_id = int(request.get("id", -1))
            cmd = request.get("cmd")
            payload = request.get("payload") or {}
            if cmd == "hello":
                reply = {"protocol": PROTOCOL_VERSION, "name": ADAPTER_NAME}
            elif cmd == "train":
                reply = {"trained_steps": model.train(payload)}
            elif cmd == "infer":
                reply = {"detections": model.infer(payload)}
            elif cmd == "save":
                reply = model.to_payload()
            elif cmd == "load":
                model = PrototypeModel.from_payload(payload)
                reply = {"trained_steps": model.trained_steps}
            elif cmd == "close":
                _respond(stdout, {"id": request_id, "ok": True, "payload": {}})
                return
            else:
                raise ModelError("bad_request", f"unknown command {cmd!r}")
            _respond(stdout, {"id": request_id, "ok": True, "payload": reply})
        except ModelError as exc:
            _respond(
                stdout,
                {
                    "id": request_id,
                    "ok": False,
                    "error": {"code": exc.code, "message": str(exc)},
                },
            )
        except Exception as exc:  # malformed request: answer, do not die
            _respond(
                stdout,
                {
                    "id": request_id,
                    "ok": False,
                    "error": {"code": "bad_request", "message": f"{type(exc).__name__}: {exc}"},
                },
            )


def main() -> None:
    parser = argparse.ArgumentParser(description="segloop external-detector adapter")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    serve_adapter(sys.stdin, sys.stdout, seed=args.seed)


if __name__ == "__main__":
    main()
