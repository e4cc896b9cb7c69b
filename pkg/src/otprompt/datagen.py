"""Seeded synthetic corpora of compositional actions.

Every class is an ordered sequence of sub-event prototypes drawn from a shared
pool.  An action instance splits its duration into equal parts, one per
sub-event, and each clip emits the prototype plus Gaussian noise.  Clips
outside any instance are background noise whose mean differs per split.

On disk a corpus is a directory holding ``manifest.json`` plus one JSON-Lines
file per split.  Each line is one video::

    {"video_id": ..., "clip_stride_seconds": 1.0, "shape": [T, D],
     "features": <base64 little-endian float64, row-major>,
     "annotations": [{"start": s, "end": e, "class_id": c}, ...]}
"""
from __future__ import annotations

import base64
import binascii
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError
from .numerics import DTYPE, make_rng, split_rng
from .representation import FeatureSequence, GroundTruthSegment

CORPUS_FORMAT = "otprompt-corpus"
SCHEMA_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class GenSpec:
    num_classes: int = 8
    sub_events_per_class: int = 3
    prototype_pool_size: int = 12
    feature_dim: int = 32
    clips_per_video: int = 256
    min_instances: int = 1
    max_instances: int = 3
    min_duration: int = 8
    max_duration: int = 32
    train_videos: int = 60
    test_videos: int = 40
    noise_sigma: float = 0.3
    background_sigma: float = 1.0
    background_shift: float = 0.05
    prototype_sharing: bool = True
    orthonormalize: bool = True
    clip_stride_seconds: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.prototype_pool_size < self.sub_events_per_class:
            raise ConfigError("prototype_pool_size must be >= sub_events_per_class")
        if not self.prototype_sharing and self.prototype_pool_size < self.num_classes * self.sub_events_per_class:
            raise ConfigError("without sharing the pool needs num_classes * sub_events_per_class prototypes")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if not self.sub_events_per_class <= self.min_duration <= self.max_duration:
            raise ConfigError("need sub_events_per_class <= min_duration <= max_duration")
        if self.max_instances * self.max_duration > self.clips_per_video:
            raise ConfigError("clips_per_video too short to hold max_instances of max_duration")

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Corpus:
    manifest: dict
    splits: dict[str, list[FeatureSequence]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.manifest["classes"])

    @property
    def feature_dim(self) -> int:
        return int(self.manifest["feature_dim"])

    @property
    def prototypes(self) -> np.ndarray:
        p = self.manifest["prototypes"]
        return _decode_features("prototypes", p["data"], tuple(p["shape"]))

    def sub_events(self, class_id: int) -> list[int]:
        return list(self.manifest["sub_events"][class_id])

    def video(self, video_id: str) -> FeatureSequence:
        for seqs in self.splits.values():
            for s in seqs:
                if s.video_id == video_id:
                    return s
        raise KeyError(video_id)


def make_prototypes(spec: GenSpec, rng) -> np.ndarray:
    raw = rng.normal(size=(spec.prototype_pool_size, spec.feature_dim))
    if spec.orthonormalize:
        if spec.prototype_pool_size <= spec.feature_dim:
            q, r = np.linalg.qr(raw.T)
            return (q * np.sign(np.diag(r))).T
        warnings.warn("prototype pool larger than feature_dim; using unit vectors without orthonormalisation",
                      stacklevel=2)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def assign_sub_events(spec: GenSpec, rng) -> list[list[int]]:
    k, C = spec.sub_events_per_class, spec.num_classes
    if not spec.prototype_sharing:
        perm = rng.permutation(spec.prototype_pool_size)
        return [[int(i) for i in perm[c * k:(c + 1) * k]] for c in range(C)]
    seen, out = set(), []
    for _ in range(C):
        while True:
            pick = [int(i) for i in rng.choice(spec.prototype_pool_size, size=k, replace=False)]
            if tuple(pick) not in seen:
                break
        seen.add(tuple(pick))
        out.append(pick)
    used = [i for s in out for i in s]
    if len(used) == len(set(used)):
        # force one shared sub-event so the compositional overlap exists
        out[1][0] = out[0][-1] if out[0][-1] not in out[1] else out[0][0]
    return out


def _place_instances(spec: GenSpec, rng, n: int) -> list[tuple[int, int]]:
    for _ in range(1000):
        durs = rng.integers(spec.min_duration, spec.max_duration + 1, size=n)
        starts = rng.integers(0, spec.clips_per_video - durs + 1)
        spans = sorted(zip(starts.tolist(), durs.tolist()))
        if all(a + d <= b for (a, d), (b, _) in zip(spans, spans[1:])):
            return [(int(a), int(d)) for a, d in spans]
    raise ConfigError("could not place non-overlapping instances; lengthen clips_per_video")


def _make_video(spec: GenSpec, rng, video_id: str, prototypes, sub_events, bg_mean) -> FeatureSequence:
    T, D = spec.clips_per_video, spec.feature_dim
    feats = bg_mean + rng.normal(0.0, spec.background_sigma, size=(T, D))
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    anns = []
    for start, dur in _place_instances(spec, rng, n):
        c = int(rng.integers(spec.num_classes))
        for part, ev in zip(np.array_split(np.arange(start, start + dur), len(sub_events[c])), sub_events[c]):
            feats[part] = prototypes[ev] + rng.normal(0.0, spec.noise_sigma, size=(len(part), D))
        s = spec.clip_stride_seconds
        anns.append(GroundTruthSegment(start * s, (start + dur) * s, c))
    return FeatureSequence(video_id, feats, spec.clip_stride_seconds, anns)


def generate_corpus(spec: GenSpec) -> Corpus:
    proto_rng, class_rng, *split_rngs = split_rng(make_rng(spec.seed), 2 + len(SPLITS))
    prototypes = make_prototypes(spec, proto_rng)
    sub_events = assign_sub_events(spec, class_rng)
    splits = {}
    counts = {"train": spec.train_videos, "test": spec.test_videos}
    for name, rng in zip(SPLITS, split_rngs):
        bg_mean = rng.normal(0.0, spec.background_shift, size=spec.feature_dim)
        splits[name] = [_make_video(spec, rng, f"{name}_{i:04d}", prototypes, sub_events, bg_mean)
                        for i in range(counts[name])]
    manifest = {
        "format": CORPUS_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "classes": [f"action_{c:02d}" for c in range(spec.num_classes)],
        "sub_events": sub_events,
        "feature_dim": spec.feature_dim,
        "clip_stride_seconds": spec.clip_stride_seconds,
        "prototypes": {"shape": list(prototypes.shape), "data": _encode_features(prototypes)},
        "splits": {name: f"{name}.jsonl" for name in SPLITS},
        "spec": asdict(spec),
    }
    return Corpus(manifest, splits)


# --------------------------------------------------------------------------
# serialisation


def _encode_features(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_features(video_id: str, payload: str, shape: tuple[int, int]) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError, TypeError) as exc:
        raise DataError(f"{video_id}: corrupted feature payload ({exc})") from exc
    if len(raw) != 8 * int(np.prod(shape)):
        raise DataError(f"{video_id}: feature payload holds {len(raw)} bytes, shape {list(shape)} needs {8 * int(np.prod(shape))}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(DTYPE)


def sequence_to_record(seq: FeatureSequence) -> dict:
    return {
        "video_id": seq.video_id,
        "clip_stride_seconds": seq.clip_stride_seconds,
        "shape": list(seq.features.shape),
        "features": _encode_features(seq.features),
        "annotations": [{"start": a.start, "end": a.end, "class_id": a.class_id} for a in seq.annotations],
    }


def record_to_sequence(rec: dict) -> FeatureSequence:
    vid = rec.get("video_id", "<unknown>")
    try:
        shape = tuple(int(s) for s in rec["shape"])
        if len(shape) != 2:
            raise ValueError(f"shape {list(shape)} is not T x D")
        feats = _decode_features(vid, rec["features"], shape)
        anns = [GroundTruthSegment(float(a["start"]), float(a["end"]), int(a["class_id"]))
                for a in rec.get("annotations", [])]
        return FeatureSequence(str(vid), feats, float(rec.get("clip_stride_seconds", 1.0)), anns)
    except DataError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{vid}: malformed record ({exc})") from exc


def write_split(seqs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in seqs:
            fh.write(json.dumps(sequence_to_record(seq), sort_keys=True) + "\n")


def read_split(path, feature_dim: int | None = None, num_classes: int | None = None) -> list[FeatureSequence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            try:
                seq = record_to_sequence(rec)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if feature_dim is not None and seq.features.shape[1] != feature_dim:
                raise DataError(f"{path}:{lineno}: {seq.video_id} has feature dim {seq.features.shape[1]}, "
                                f"manifest says {feature_dim}")
            if num_classes is not None:
                for a in seq.annotations:
                    if not 0 <= a.class_id < num_classes:
                        raise DataError(f"{path}:{lineno}: {seq.video_id} has class id {a.class_id} "
                                        f"outside [0, {num_classes})")
            out.append(seq)
    return out


def write_corpus(corpus: Corpus, path) -> None:
    os.makedirs(path, exist_ok=True)
    for name, fname in corpus.manifest["splits"].items():
        write_split(corpus.splits.get(name, []), os.path.join(path, fname))
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(corpus.manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_corpus(path, splits=None) -> Corpus:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no corpus manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: malformed manifest ({exc.msg})") from exc
    if manifest.get("format") != CORPUS_FORMAT:
        raise DataError(f"{mpath}: not a corpus manifest")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{mpath}: unsupported schema version {manifest.get('schema_version')!r}")
    names = manifest["splits"] if splits is None else {k: manifest["splits"][k] for k in splits}
    corpus = Corpus(manifest)
    for name, fname in names.items():
        corpus.splits[name] = read_split(os.path.join(path, fname), int(manifest["feature_dim"]),
                                         len(manifest["classes"]))
    return corpus
