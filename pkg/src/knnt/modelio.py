"""Tagged model files: a 4-byte magic, a JSON header, then raw parameters.

Every artifact kind gets its own magic so loading a file with the wrong
command fails on the first four bytes, before any computation.  Headers
carry the small config fields (dims, layer counts, variant flags) needed
to rebuild the network around the parameters.
"""

from __future__ import annotations

import json
import struct

from .params import FormatError, ParameterStore

VERSION = 1

LM_MAGIC = b"RTLM"
TRANSDUCER_MAGIC = b"RTTD"
ADAPTER_MAGIC = b"RTAD"


def save_model(path, magic: bytes, header: dict, store: ParameterStore):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        f.write(store.to_bytes())


def load_model(path, magic: bytes) -> tuple[dict, ParameterStore]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != magic:
        raise FormatError(
            f"{path}: bad magic {blob[:4]!r}, expected {magic.decode('ascii')}")
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    header = json.loads(blob[12:12 + head_len].decode("utf-8"))
    store = ParameterStore.from_bytes(blob[12 + head_len:])
    return header, store
