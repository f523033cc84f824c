"""Example external detector for segloop: a stdio adapter around a tiny
nearest-prototype pixel classifier. Demonstrates that any detector speaking
the newline-delimited JSON protocol can replace the builtin one."""

from .model import PrototypeModel
from .server import ADAPTER_NAME, PROTOCOL_VERSION, serve_adapter

__all__ = ["ADAPTER_NAME", "PROTOCOL_VERSION", "PrototypeModel", "serve_adapter"]
