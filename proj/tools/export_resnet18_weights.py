#!/usr/bin/env python3
"""Convert torchvision's ImageNet ResNet-18 weights into the archive format read by aura.

    python3 tools/export_resnet18_weights.py                  # writes into the weight cache
    python3 tools/export_resnet18_weights.py -o weights.aura
    python3 tools/export_resnet18_weights.py --state-dict resnet18-f37072fd.pth -o weights.aura

The classifier head (fc.*) is dropped. Tensor names keep torchvision's spelling, which is
what the encoder expects.
"""

import argparse
import hashlib
import json
import os
import struct
import sys
from pathlib import Path

import torch

MAGIC = b"AURAARCH"
VERSION = 1
DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}


def cache_dir() -> Path:
    if os.environ.get("AURA_WEIGHTS_CACHE"):
        return Path(os.environ["AURA_WEIGHTS_CACHE"])
    if os.environ.get("XDG_CACHE_HOME"):
        return Path(os.environ["XDG_CACHE_HOME"]) / "aura-net"
    return Path.home() / ".cache" / "aura-net"


def encode(header: dict, tensors: list) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    # Same bytes as nlohmann::json::dump(): sorted keys, no whitespace.
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<Q", len(text)) + text
    out += struct.pack("<Q", len(tensors))
    for name, t in tensors:
        t = t.detach().cpu().contiguous()
        if t.dtype not in DTYPES:
            t = t.to(torch.float32)
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<B", DTYPES[t.dtype])
        out += struct.pack("<I", t.dim())
        for d in t.shape:
            out += struct.pack("<q", d)
        out += t.numpy().tobytes(order="C")
    out += hashlib.sha256(out).digest()
    return bytes(out)


def load_state(args) -> tuple:
    if args.state_dict:
        return torch.load(args.state_dict, map_location="cpu"), f"state dict {Path(args.state_dict).name}"
    import torchvision

    model = torchvision.models.resnet18(weights=torchvision.models.ResNet18_Weights.IMAGENET1K_V1)
    return model.state_dict(), "torchvision ResNet18_Weights.IMAGENET1K_V1"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-o", "--output", type=Path, help="archive path (default: <cache>/resnet18_imagenet.aura)")
    parser.add_argument("--state-dict", help="convert a saved torchvision state dict instead of downloading")
    args = parser.parse_args()

    state, source = load_state(args)
    tensors = [(k, v) for k, v in state.items() if not k.startswith("fc.")]
    blob = encode({"kind": "encoder-weights", "encoder": "resnet18", "source": source}, tensors)

    out = args.output or cache_dir() / "resnet18_imagenet.aura"
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".part")
    tmp.write_bytes(blob)
    tmp.replace(out)
    print(f"wrote {len(tensors)} tensors to {out}")
    print(f"sha256 {hashlib.sha256(blob).hexdigest()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
