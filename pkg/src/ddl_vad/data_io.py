"""Feature-bag files, manifests, uniform subsampling and the synthetic
dataset generator."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SynthSpec
from .metrics import FrameAnnotation, write_annotations

MAGIC = b"FBAG"
VERSION = 1
FRAMES_PER_SNIPPET = 16
_HEADER = struct.Struct("<4sIII")


class BagFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureBag:
    video_id: str
    features: np.ndarray
    label: int
    path: str | None = None

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class ManifestEntry:
    path: str
    video_id: str
    label: int


@dataclass
class Manifest:
    dim: int
    entries: list[ManifestEntry]
    frames_per_snippet: int = FRAMES_PER_SNIPPET
    root: str = "."

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)


def write_bag(bag: FeatureBag, path) -> None:
    x = np.asarray(bag.features)
    if x.ndim != 2:
        raise BagFormatError(f"features must be T x D, got shape {x.shape}")
    payload = np.ascontiguousarray(x, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise BagFormatError("non-finite feature values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, x.shape[0], x.shape[1]))
        fh.write(payload.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise BagFormatError(f"{path}: truncated header")
    magic, version, t_len, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BagFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BagFormatError(f"{path}: unsupported version {version}")
    expected = t_len * dim * 4
    body = blob[_HEADER.size:]
    if len(body) < expected:
        raise BagFormatError(f"{path}: truncated payload ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise BagFormatError(f"{path}: {len(body) - expected} trailing bytes")
    x = np.frombuffer(body, dtype="<f4").reshape(t_len, dim)
    if not np.all(np.isfinite(x)):
        raise BagFormatError(f"{path}: non-finite feature values")
    return x.astype(np.float64)


def read_bag(path, label: int = 0, video_id: str | None = None) -> FeatureBag:
    """Load one FB1 file. The label lives in the manifest, so it is passed in."""
    x = read_features(path)
    if x.shape[0] < 2:
        raise BagFormatError(f"{path}: bag has {x.shape[0]} snippets, need at least 2")
    if label not in (0, 1):
        raise BagFormatError(f"label must be 0 or 1, got {label!r}")
    return FeatureBag(video_id or Path(path).stem, x, int(label), str(path))


def uniform_sample(bag: FeatureBag, t_max: int) -> FeatureBag:
    """Keep ``t_max`` rows at rounded evenly spaced indices; first and last kept."""
    return FeatureBag(bag.video_id, bag.features[sample_indices(bag.length, t_max)], bag.label, bag.path)


def sample_indices(t_len: int, t_max: int) -> np.ndarray:
    if t_max < 2:
        raise ValueError("t_max must be >= 2")
    if t_len <= t_max:
        return np.arange(t_len)
    m = np.arange(t_max, dtype=np.int64)
    # round(m * (T-1) / (t_max-1)), half up, in exact integer arithmetic
    return (2 * m * (t_len - 1) + (t_max - 1)) // (2 * (t_max - 1))


def write_manifest(manifest: Manifest, path) -> None:
    data = {
        "dim": manifest.dim,
        "frames_per_snippet": manifest.frames_per_snippet,
        "entries": [{"path": e.path, "video_id": e.video_id, "label": e.label} for e in manifest.entries],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def read_manifest(path) -> Manifest:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    try:
        entries = [ManifestEntry(str(e["path"]), str(e["video_id"]), int(e["label"])) for e in data["entries"]]
        dim = int(data["dim"])
        fps = int(data.get("frames_per_snippet", FRAMES_PER_SNIPPET))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    if fps != FRAMES_PER_SNIPPET:
        raise ManifestError(f"{path}: frames_per_snippet must be {FRAMES_PER_SNIPPET}")
    for e in entries:
        if e.label not in (0, 1):
            raise ManifestError(f"{path}: entry {e.video_id} has label {e.label}")
    return Manifest(dim, entries, fps, root=str(Path(path).parent))


def load_bags(manifest: Manifest) -> list[FeatureBag]:
    """Read every bag and check it against the manifest dimension."""
    bags = []
    for entry in manifest.entries:
        full = manifest.resolve(entry)
        if not os.path.exists(full):
            raise ManifestError(f"missing feature file {full}")
        bag = read_bag(full, entry.label, entry.video_id)
        if bag.features.shape[1] != manifest.dim:
            raise ManifestError(
                f"{entry.video_id}: feature dim {bag.features.shape[1]} != manifest dim {manifest.dim}"
            )
        bags.append(bag)
    return bags


@dataclass
class SyntheticDataset:
    spec: SynthSpec
    train: list[FeatureBag]
    test: list[FeatureBag]
    annotations: list[FrameAnnotation] = field(default_factory=list)


def _background(rng, t_len, dim, noise, spread):
    """Slowly varying AR(1) walk around a random base point."""
    base = rng.normal(0.0, spread, dim)
    walk = np.zeros((t_len, dim))
    state = rng.normal(0.0, noise, dim)
    for t in range(t_len):
        state = 0.9 * state + rng.normal(0.0, noise, dim)
        walk[t] = state
    return base + walk


def _plant_segments(rng, t_len, spec: SynthSpec):
    """Non-overlapping [start, end) snippet segments, separated by >= 1 snippet."""
    count = int(rng.integers(spec.segments_min, spec.segments_max + 1))
    lengths = rng.integers(spec.segment_len_min, spec.segment_len_max + 1, size=count)
    slack = t_len - int(lengths.sum()) - (count - 1)
    while slack < 0:  # too many segments for this video; drop from the end
        count -= 1
        lengths = lengths[:count]
        slack = t_len - int(lengths.sum()) - (count - 1)
    # distribute the slack over count + 1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=count))
    gaps = np.diff(np.concatenate([[0], cuts]))
    segments, pos = [], 0
    for i in range(count):
        pos += int(gaps[i]) + (1 if i else 0)
        segments.append((pos, pos + int(lengths[i])))
        pos += int(lengths[i])
    return segments


def _make_video(rng, spec: SynthSpec, directions, video_id, abnormal):
    t_len = int(rng.integers(spec.t_min, spec.t_max_len + 1))
    x = _background(rng, t_len, spec.dim, spec.noise, spec.scene_spread)
    segments = []
    if abnormal:
        segments = _plant_segments(rng, t_len, spec)
        for start, end in segments:
            direction = directions[int(rng.integers(len(directions)))]
            direction = direction + spec.direction_jitter * rng.normal(size=spec.dim) / np.sqrt(spec.dim)
            shift = direction / np.linalg.norm(direction) * spec.jump * np.sqrt(spec.dim)
            interior = np.zeros((end - start, spec.dim))
            state = np.zeros(spec.dim)
            for t in range(end - start):
                state = 0.8 * state + rng.normal(0.0, spec.noise, spec.dim)
                interior[t] = state
            x[start:end] += shift + interior
    x += rng.normal(0.0, spec.snippet_noise, x.shape)
    # store exactly what an FB1 file holds
    x = x.astype(np.float32).astype(np.float64)
    tail = int(rng.integers(0, FRAMES_PER_SNIPPET))
    total_frames = t_len * FRAMES_PER_SNIPPET + tail
    intervals = [
        (s * FRAMES_PER_SNIPPET, min(e * FRAMES_PER_SNIPPET, total_frames) - 1) for s, e in segments
    ]
    # a trailing partial window belongs to the last snippet
    if segments and segments[-1][1] == t_len:
        intervals[-1] = (intervals[-1][0], total_frames - 1)
    bag = FeatureBag(video_id, x, int(abnormal))
    return bag, FrameAnnotation(video_id, total_frames, intervals)


def generate_synthetic(spec: SynthSpec) -> SyntheticDataset:
    """Background walks; abnormal videos get segments pushed along one of a few
    shared anomaly directions, so their boundaries show sharp feature jumps."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    directions = rng.normal(size=(spec.anomaly_types, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    videos = []
    for label, count in ((0, spec.normal_videos), (1, spec.anomaly_videos)):
        prefix = "anomaly" if label else "normal"
        for i in range(count):
            videos.append(_make_video(rng, spec, directions, f"{prefix}_{i:03d}", label))

    train, test, annotations = [], [], []
    for label, count in ((0, spec.normal_videos), (1, spec.anomaly_videos)):
        n_test = int(round(count * spec.test_fraction))
        cls = [v for v in videos if v[0].label == label]
        train += [b for b, _ in cls[: count - n_test]]
        test += [b for b, _ in cls[count - n_test:]]
        annotations += [a for _, a in cls]
    return SyntheticDataset(spec, train, test, annotations)


def write_synthetic(ds: SyntheticDataset, out_dir) -> dict[str, str]:
    """Write bags, train/test manifests and annotations; returns the paths."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, bags in (("train", ds.train), ("test", ds.test)):
        entries = []
        for bag in bags:
            rel = f"bags/{bag.video_id}.fb1"
            write_bag(bag, out / rel)
            entries.append(ManifestEntry(rel, bag.video_id, bag.label))
        manifest_path = out / f"{split}_manifest.json"
        write_manifest(Manifest(ds.spec.dim, entries), manifest_path)
        paths[split] = str(manifest_path)
    paths["annotations"] = str(out / "annotations.json")
    write_annotations(ds.annotations, paths["annotations"])
    return paths
