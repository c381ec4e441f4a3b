"""On-disk format for generated task shards.

Each task is one binary container: a magic tag, a JSON header describing
shapes and kernel metadata, then row-major little-endian float64 payloads
(support points X, raw values, x*). An ``index.json`` at the output root
lists the tasks belonging to each shard.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tasks import KernelSpec, SampledFunction

MAGIC = b"PTSK"
VERSION = 1


def write_task(path: Path, fn: SampledFunction) -> None:
    header = {
        "version": VERSION,
        "dimension": fn.dimension,
        "n_points": fn.n_support,
        "delta_y": fn.delta_y,
        "mean": fn.mean,
        "kernel": {
            "family": fn.kernel.family,
            "sigma": fn.kernel.sigma,
            "lengthscales": fn.kernel.lengthscales.tolist(),
        },
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(fn.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(fn.y_raw, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(fn.x_opt, dtype="<f8").tobytes())


def read_task(path: Path) -> SampledFunction:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a task container")
        (head_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(head_len))
        if header["version"] != VERSION:
            raise ValueError(f"{path}: unsupported version {header['version']}")
        d, n = header["dimension"], header["n_points"]
        x = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        y_raw = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        x_opt = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
    spec = KernelSpec(
        family=header["kernel"]["family"],
        sigma=header["kernel"]["sigma"],
        lengthscales=np.asarray(header["kernel"]["lengthscales"]),
    )
    return SampledFunction(
        dimension=d,
        kernel=spec,
        mean=header["mean"],
        x=x,
        y_raw=y_raw,
        x_opt=x_opt,
        delta_y=header["delta_y"],
    )


def write_shards(
    out_dir: Path,
    functions: list[SampledFunction],
    tasks_per_shard: int = 100,
) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"version": VERSION, "shards": []}
    for start in range(0, len(functions), tasks_per_shard):
        shard_id = start // tasks_per_shard
        shard_name = f"shard_{shard_id:04d}"
        shard_dir = out_dir / shard_name
        shard_dir.mkdir(exist_ok=True)
        names = []
        for i, fn in enumerate(functions[start : start + tasks_per_shard]):
            name = f"task_{start + i:06d}.bin"
            write_task(shard_dir / name, fn)
            names.append(name)
        index["shards"].append({"name": shard_name, "tasks": names})
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=2)
    return index


def read_shards(data_dir: Path) -> list[Path]:
    data_dir = Path(data_dir)
    with open(data_dir / "index.json") as fh:
        index = json.load(fh)
    paths = []
    for shard in index["shards"]:
        for name in shard["tasks"]:
            paths.append(data_dir / shard["name"] / name)
    return paths
