"""Checkpoint bundles: manifest.txt + weights.bin + state.bin.

manifest.txt carries one `group/tensor dtype d0,d1,... offset` line per
tensor (sorted group, then sorted tensor name), preceded by `# format` and
`# frozen <group> <sha256>` comment lines. weights.bin is the raw float32
little-endian concatenation in manifest order. state.bin holds the training
step, rng states, and optimizer moments in a fixed binary layout so that
load followed by save is byte-identical.
"""

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, StateError

FORMAT_VERSION = 1
STATE_MAGIC = b"UAVS"


@dataclass
class TrainState:
    step: int = 0
    rng_blobs: dict = field(default_factory=dict)   # name -> bytes
    moments: dict = field(default_factory=dict)     # name -> float32 ndarray


def _tensor_items(module: nn.Module):
    sd = module.state_dict()
    for name in sorted(sd):
        tensor = sd[name]
        if tensor.dtype != torch.float32:
            raise StateError(f"checkpoint tensors must be float32, {name} is {tensor.dtype}")
        yield name, tensor.detach().contiguous()


def group_hash(module: nn.Module) -> str:
    """sha256 over the group's tensors in manifest order."""
    h = hashlib.sha256()
    for name, tensor in _tensor_items(module):
        h.update(name.encode())
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def is_frozen(module: nn.Module) -> bool:
    return all(not p.requires_grad for p in module.parameters())


def assert_zero_grads(module: nn.Module, group: str) -> None:
    """Frozen groups must accumulate no gradient at all."""
    for name, p in module.named_parameters():
        if p.grad is not None and float(p.grad.abs().max()) != 0.0:
            raise StateError(f"frozen group {group} accumulated gradient on {name}")


def save_checkpoint(ckpt_dir, groups: dict, frozen=(), state: TrainState = None) -> Path:
    """Write the bundle atomically (temp files renamed into place)."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    lines = [f"# format {FORMAT_VERSION}"]
    for gname in sorted(frozen):
        lines.append(f"# frozen {gname} {group_hash(groups[gname])}")
    blobs = []
    offset = 0
    for gname in sorted(groups):
        for tname, tensor in _tensor_items(groups[gname]):
            data = tensor.numpy().astype("<f4", copy=False).tobytes()
            dims = ",".join(str(d) for d in tensor.shape) or "1"
            lines.append(f"{gname}/{tname} f4 {dims} {offset}")
            blobs.append(data)
            offset += len(data)

    _atomic_write(ckpt_dir / "manifest.txt", ("\n".join(lines) + "\n").encode())
    _atomic_write(ckpt_dir / "weights.bin", b"".join(blobs))
    _atomic_write(ckpt_dir / "state.bin", _pack_state(state or TrainState()))
    return ckpt_dir


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _pack_state(state: TrainState) -> bytes:
    parts = [STATE_MAGIC, struct.pack("<IQ", FORMAT_VERSION, state.step)]
    parts.append(struct.pack("<I", len(state.rng_blobs)))
    for name in sorted(state.rng_blobs):
        blob = state.rng_blobs[name]
        parts.append(struct.pack("<I", len(name)) + name.encode())
        parts.append(struct.pack("<Q", len(blob)) + blob)
    parts.append(struct.pack("<I", len(state.moments)))
    for name in sorted(state.moments):
        arr = np.ascontiguousarray(state.moments[name], dtype="<f4")
        parts.append(struct.pack("<I", len(name)) + name.encode())
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_state(data: bytes, path) -> TrainState:
    if data[:4] != STATE_MAGIC:
        raise FormatError(f"bad state magic {data[:4]!r}", path=path)
    version, step = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise StateError(f"state format version {version} != {FORMAT_VERSION}")
    pos = 16
    (n_blobs,) = struct.unpack_from("<I", data, pos)
    pos += 4
    rng_blobs = {}
    for _ in range(n_blobs):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (blen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        rng_blobs[name] = data[pos:pos + blen]
        pos += blen
    (n_tensors,) = struct.unpack_from("<I", data, pos)
    pos += 4
    moments = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{max(ndim, 1)}I", data, pos)[:ndim] if ndim else (1,)
        pos += 4 * max(ndim, 1)
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(
            shape if ndim else ())
        pos += count * 4
        moments[name] = arr.copy()
    return TrainState(step=step, rng_blobs=rng_blobs, moments=moments)


def read_manifest(ckpt_dir):
    """Returns (entries, frozen_hashes); entries are
    (group, tensor, dtype, shape, offset) in file order."""
    path = Path(ckpt_dir) / "manifest.txt"
    if not path.exists():
        raise StateError(f"no checkpoint manifest at {path}")
    entries, frozen = [], {}
    version = None
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if fields[0] == "format":
                version = int(fields[1])
            elif fields[0] == "frozen":
                frozen[fields[1]] = fields[2]
            continue
        name, dtype, dims, offset = line.split()
        group, tensor = name.split("/", 1)
        shape = tuple(int(d) for d in dims.split(","))
        entries.append((group, tensor, dtype, shape, int(offset)))
    if version != FORMAT_VERSION:
        raise StateError(f"checkpoint format version {version} != {FORMAT_VERSION} at {path}")
    return entries, frozen


def load_checkpoint(ckpt_dir, groups: dict):
    """Load tensors into the provided module skeletons.

    Returns (TrainState, frozen_hashes). Missing groups/tensors or shape
    mismatches raise StateError naming the offender.
    """
    ckpt_dir = Path(ckpt_dir)
    entries, frozen = read_manifest(ckpt_dir)
    blob = (ckpt_dir / "weights.bin").read_bytes()

    manifest_groups = {g for g, *_ in entries}
    for gname in groups:
        if gname not in manifest_groups:
            raise StateError(f"checkpoint at {ckpt_dir} is missing group '{gname}'")

    state_dicts = {gname: dict(_tensor_items(groups[gname])) for gname in groups}
    loaded = {gname: {} for gname in groups}
    for group, tensor, dtype, shape, offset in entries:
        if group not in groups:
            continue
        if tensor not in state_dicts[group]:
            raise StateError(f"unexpected tensor {group}/{tensor} for current model")
        expected = tuple(state_dicts[group][tensor].shape) or (1,)
        if shape != expected and not (shape == (1,) and expected == (1,)):
            raise StateError(
                f"shape mismatch for {group}/{tensor}: checkpoint {shape} vs model {expected}")
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        loaded[group][tensor] = torch.from_numpy(arr.copy()).view(
            state_dicts[group][tensor].shape)
    for gname, module in groups.items():
        missing = set(module.state_dict()) - set(loaded[gname])
        if missing:
            raise StateError(f"checkpoint missing tensors for {gname}: {sorted(missing)[:3]}")
        module.load_state_dict(loaded[gname])

    state = _unpack_state((ckpt_dir / "state.bin").read_bytes(), ckpt_dir / "state.bin")
    return state, frozen
