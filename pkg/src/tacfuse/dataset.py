"""Demonstration recording, the on-disk episode format, normalization
statistics, and minibatch sampling.

Episode files are self-describing named-array containers:

    magic   8 bytes  b"RTEP0001"
    count   u32      number of named arrays
    array   u16 name length, UTF-8 name,
            u8 dtype code (0 = float32),
            u8 rank, rank x u64 extents (little-endian),
            raw float32 payload (little-endian, row-major)

Arrays are "cam0", "cam1", "tac0", "tac1", "proprio", "actions" plus
rank-0 metadata "clearance", "seed", "noise". A JSON manifest records
filenames, lengths, clearance levels and a sha256 per file, and is
rewritten atomically.

Only successful expert episodes are retained for training; failures are
counted and discarded.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import pegsim
from .rng import stream

EP_MAGIC = b"RTEP0001"
_F32 = np.dtype("<f4")


class EpisodeFormatError(ValueError):
    pass


@dataclasses.dataclass
class EpisodeRecord:
    cam0: np.ndarray      # (L,3,64,64)
    cam1: np.ndarray
    tac0: np.ndarray      # (L,1,32,32)
    tac1: np.ndarray
    proprio: np.ndarray   # (L,4)
    actions: np.ndarray   # (L,3)
    clearance: float
    seed: int
    noise: float

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    def frame(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cams = np.stack([self.cam0[t], self.cam1[t]])
        tacs = np.stack([self.tac0[t], self.tac1[t]])
        return cams, tacs, self.proprio[t]


def record_episode(seed: int, clearance: str, noise_scale: float,
                   horizon: int = 200) -> tuple[EpisodeRecord | None, bool]:
    """Roll out the scripted expert; keep the episode only on success."""
    state = pegsim.reset(seed, clearance, randomize=True)
    cam0, cam1, tac0, tac1, prop, acts = [], [], [], [], [], []
    success = False
    for _ in range(horizon):
        obs = pegsim.render(state)
        # store float32 and execute the same rounded value, so replaying the
        # recorded actions reproduces the trajectory bitwise
        action = np.asarray(pegsim.expert_action(state, noise_scale), dtype=np.float32)
        cam0.append(obs.cams[0])
        cam1.append(obs.cams[1])
        tac0.append(obs.tacs[0])
        tac1.append(obs.tacs[1])
        prop.append(obs.proprio)
        acts.append(action)
        state = pegsim.step(state, action)
        if state.depth >= pegsim.FULL_DEPTH:
            success = True
            break
    if not success:
        return None, False
    rec = EpisodeRecord(
        cam0=np.stack(cam0), cam1=np.stack(cam1), tac0=np.stack(tac0), tac1=np.stack(tac1),
        proprio=np.stack(prop), actions=np.stack(acts),
        clearance=state.clearance, seed=seed, noise=noise_scale)
    return rec, True


# ---- serialization ----

def _named_arrays(rec: EpisodeRecord) -> dict[str, np.ndarray]:
    return {
        "cam0": rec.cam0, "cam1": rec.cam1, "tac0": rec.tac0, "tac1": rec.tac1,
        "proprio": rec.proprio, "actions": rec.actions,
        "clearance": np.float32(rec.clearance), "seed": np.float32(rec.seed),
        "noise": np.float32(rec.noise),
    }


def write_episode(rec: EpisodeRecord, path: str | Path) -> None:
    chunks = [EP_MAGIC]
    arrays = _named_arrays(rec)
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=_F32)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", 0, arr.ndim))
        if arr.ndim:
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_episode(path: str | Path) -> EpisodeRecord:
    buf = Path(path).read_bytes()
    if buf[:8] != EP_MAGIC:
        raise EpisodeFormatError(f"bad magic {buf[:8]!r} in {path}, expected {EP_MAGIC!r}")
    off = 8

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise EpisodeFormatError(f"truncated episode file {path}: needed {n} bytes for {what} at offset {off}")
        out = buf[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code != 0:
            raise EpisodeFormatError(f"array '{name}': unknown dtype code {code} at offset {off - 2}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents")) if rank else ()
        n_items = int(np.prod(shape)) if rank else 1
        raw = take(n_items * 4, f"payload of '{name}'")
        arrays[name] = np.frombuffer(raw, dtype=_F32).reshape(shape).copy()
    if off != len(buf):
        raise EpisodeFormatError(f"trailing bytes after last array at offset {off}")
    missing = {"cam0", "cam1", "tac0", "tac1", "proprio", "actions", "clearance", "seed", "noise"} - set(arrays)
    if missing:
        raise EpisodeFormatError(f"episode file {path} missing arrays: {sorted(missing)}")
    return EpisodeRecord(
        cam0=arrays["cam0"], cam1=arrays["cam1"], tac0=arrays["tac0"], tac1=arrays["tac1"],
        proprio=arrays["proprio"], actions=arrays["actions"],
        clearance=float(arrays["clearance"]), seed=int(arrays["seed"]), noise=float(arrays["noise"]))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(dir_path: str | Path, entries: list[dict]) -> Path:
    dir_path = Path(dir_path)
    manifest = {"format": EP_MAGIC.decode("ascii"), "episodes": entries}
    tmp = dir_path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    final = dir_path / "manifest.json"
    os.replace(tmp, final)
    return final


def load_manifest(dir_path: str | Path) -> dict:
    path = Path(dir_path) / "manifest.json"
    if not path.exists():
        raise EpisodeFormatError(f"no manifest.json in {dir_path}")
    return json.loads(path.read_text(encoding="utf-8"))


def gen_dataset(out_dir: str | Path, episodes: int, clearance: str, seed: int,
                noise_lo: float = 0.02, noise_hi: float = 0.08,
                horizon: int = 200, max_attempt_factor: int = 4) -> dict:
    """Generate `episodes` retained expert episodes plus the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    attempts = 0
    retained = 0
    max_attempts = max(episodes * max_attempt_factor, episodes + 8)
    while retained < episodes:
        if attempts >= max_attempts:
            raise RuntimeError(f"expert retained only {retained}/{episodes} after {attempts} attempts")
        ep_seed = seed + attempts
        noise = float(stream(seed, "noise-jitter", attempts).uniform(noise_lo, noise_hi))
        rec, ok = record_episode(ep_seed, clearance, noise, horizon)
        attempts += 1
        if not ok:
            continue
        fname = f"ep_{ep_seed:06d}.rtep"
        write_episode(rec, out_dir / fname)
        entries.append({
            "file": fname, "length": rec.length, "clearance": clearance,
            "seed": ep_seed, "noise": noise, "sha256": _sha256(out_dir / fname),
        })
        retained += 1
    write_manifest(out_dir, entries)
    return {"requested": episodes, "retained": retained, "attempts": attempts}


def load_dataset(dir_path: str | Path, verify: bool = False) -> list[EpisodeRecord]:
    dir_path = Path(dir_path)
    manifest = load_manifest(dir_path)
    records = []
    for entry in manifest["episodes"]:
        path = dir_path / entry["file"]
        if verify and _sha256(path) != entry["sha256"]:
            raise EpisodeFormatError(f"hash mismatch for {path}")
        records.append(read_episode(path))
    return records


# ---- normalization ----

STD_FLOOR = 1e-6


@dataclasses.dataclass
class NormStats:
    action_mean: np.ndarray
    action_std: np.ndarray
    proprio_mean: np.ndarray
    proprio_std: np.ndarray

    def normalize_action(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=np.float32) - self.action_mean) / self.action_std

    def denormalize_action(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a, dtype=np.float32) * self.action_std + self.action_mean

    def normalize_proprio(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float32) - self.proprio_mean) / self.proprio_std

    def to_records(self) -> dict[str, np.ndarray]:
        return {"norm.action_mean": self.action_mean, "norm.action_std": self.action_std,
                "norm.proprio_mean": self.proprio_mean, "norm.proprio_std": self.proprio_std}

    @classmethod
    def from_records(cls, rec: dict[str, np.ndarray]) -> "NormStats":
        return cls(action_mean=rec["norm.action_mean"].astype(np.float32),
                   action_std=rec["norm.action_std"].astype(np.float32),
                   proprio_mean=rec["norm.proprio_mean"].astype(np.float32),
                   proprio_std=rec["norm.proprio_std"].astype(np.float32))


def compute_norm_stats(records: list[EpisodeRecord]) -> NormStats:
    """Population mean/std per dimension, std floored at 1e-6."""
    if not records:
        raise ValueError("compute_norm_stats requires at least one episode")
    actions = np.concatenate([r.actions for r in records], axis=0).astype(np.float64)
    proprio = np.concatenate([r.proprio for r in records], axis=0).astype(np.float64)
    return NormStats(
        action_mean=actions.mean(axis=0).astype(np.float32),
        action_std=np.maximum(actions.std(axis=0), STD_FLOOR).astype(np.float32),
        proprio_mean=proprio.mean(axis=0).astype(np.float32),
        proprio_std=np.maximum(proprio.std(axis=0), STD_FLOOR).astype(np.float32),
    )


def split_by_seed_parity(records: list[EpisodeRecord]) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Train split = even episode seeds, validation = odd."""
    train = [r for r in records if r.seed % 2 == 0]
    val = [r for r in records if r.seed % 2 == 1]
    return train, val


# ---- chunk sampling ----

@dataclasses.dataclass
class ChunkSample:
    cams: np.ndarray      # (2,3,64,64)
    tacs: np.ndarray      # (2,1,32,32)
    proprio: np.ndarray   # (4,) normalized
    chunk: np.ndarray     # (k,3) normalized, zero-padded
    mask: np.ndarray      # (k,) 1 for valid rows


@dataclasses.dataclass
class ChunkBatch:
    cams: np.ndarray
    tacs: np.ndarray
    proprio: np.ndarray
    chunk: np.ndarray
    mask: np.ndarray


def make_chunk_sample(rec: EpisodeRecord, t: int, stats: NormStats, k: int) -> ChunkSample:
    cams, tacs, proprio = rec.frame(t)
    avail = rec.actions[t:t + k]
    chunk = np.zeros((k, rec.actions.shape[1]), dtype=np.float32)
    mask = np.zeros(k, dtype=np.float32)
    chunk[:avail.shape[0]] = stats.normalize_action(avail)
    mask[:avail.shape[0]] = 1.0
    return ChunkSample(cams=cams, tacs=tacs, proprio=stats.normalize_proprio(proprio),
                       chunk=chunk, mask=mask)


def sample_batch(records: list[EpisodeRecord], stats: NormStats, batch_size: int,
                 rng: np.random.Generator, k: int) -> ChunkBatch:
    """Uniform over episodes, then uniform over start steps."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    samples = []
    for _ in range(batch_size):
        rec = records[int(rng.integers(len(records)))]
        t = int(rng.integers(rec.length))
        samples.append(make_chunk_sample(rec, t, stats, k))
    return ChunkBatch(
        cams=np.stack([s.cams for s in samples]),
        tacs=np.stack([s.tacs for s in samples]),
        proprio=np.stack([s.proprio for s in samples]),
        chunk=np.stack([s.chunk for s in samples]),
        mask=np.stack([s.mask for s in samples]),
    )
