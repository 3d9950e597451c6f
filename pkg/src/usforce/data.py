"""Frames, force labels, the cue-driven force trapezoid and a phantom generator.

The phantom stands in for forearm B-mode recordings: a static per-subject
tissue background, multiplicative speckle, and two Gaussian "muscle" blobs
whose positions identify the skill and whose brightness follows the force.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import npyio

SKILL_NAMES = ("push-to-horizontal", "push-to-vertical", "slide-to-edge", "flip", "simple-pick")
NUM_SKILLS = len(SKILL_NAMES)
SEGMENT_LENGTH = 100
FRAMES_PER_SKILL = 2000
RATE_HZ = 6.3
SENSOR_MAX_N = 4.0
TRAIN_FRACTION = 0.8
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Cue:
    frame_offset: int
    tone_hz: int
    duration_ms: int
    meaning: str


CUE_SCHEDULE = (
    Cue(20, 500, 250, "start"),
    Cue(40, 750, 250, "hold-max"),
    Cue(60, 600, 250, "reduce"),
    Cue(80, 550, 250, "stop"),
)


@dataclass(frozen=True)
class ForceProfile:
    """Trapezoid over one 100-frame segment: rest, ramp up, hold, ramp down, rest."""
    peak_force: float

    def __post_init__(self):
        if not 0.0 < self.peak_force <= SENSOR_MAX_N:
            raise ValueError(f"peak force must be in (0, {SENSOR_MAX_N}] N, got {self.peak_force}")

    def value(self, frame_offset: int) -> float:
        start, hold, reduce, stop = (c.frame_offset for c in CUE_SCHEDULE)
        k = int(frame_offset) % SEGMENT_LENGTH
        if k < start or k >= stop:
            return 0.0
        if k < hold:
            return self.peak_force * (k - start) / (hold - start)
        if k < reduce:
            return self.peak_force
        return self.peak_force * (stop - k) / (stop - reduce)


def profile_value(profile: ForceProfile, frame_index: int) -> float:
    if frame_index < 0:
        raise ValueError("frame_index must be non-negative")
    return profile.value(frame_index)


@dataclass(frozen=True)
class SensorTriple:
    thumb: float
    index: float
    middle: float


def force_ground_truth(sensors: SensorTriple) -> float:
    """Mean of the three fingertip sensor readings (N)."""
    vals = (sensors.thumb, sensors.index, sensors.middle)
    if any(v < 0 for v in vals):
        raise ValueError(f"negative sensor reading in {sensors}")
    if any(v > SENSOR_MAX_N for v in vals):
        raise ValueError(f"sensor reading above {SENSOR_MAX_N} N in {sensors}")
    return sum(vals) / 3.0


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """8-bit grayscale (H, W) -> float32 (H, W, 1) in [0, 1]."""
    raw = np.asarray(raw)
    return (raw.astype(np.float32) / np.float32(255.0))[..., None]


@dataclass
class FrameRecord:
    image: np.ndarray
    skill: int
    force_n: float
    subject: str
    frame_index: int


@dataclass
class SkillRecording:
    """All frames of one (subject, skill) acquisition, in acquisition order."""
    subject: str
    skill: int
    frames: np.ndarray           # (N, H, W, 1) float32
    forces: np.ndarray           # (N,) float32, Newtons
    anchors: np.ndarray | None = None   # (k, 2) blob centres in pixels (row, col)
    blob_radius: float | None = None

    def __len__(self) -> int:
        return len(self.forces)

    def frame(self, i: int) -> FrameRecord:
        return FrameRecord(self.frames[i], self.skill, float(self.forces[i]), self.subject, i)


@dataclass
class DatasetManifest:
    subjects: list[str]
    image_size: int
    frames_per_skill: int
    rate_hz: float = RATE_HZ
    sensor_max_n: float = SENSOR_MAX_N
    segment_length: int = SEGMENT_LENGTH
    skills: list[int] = field(default_factory=lambda: list(range(NUM_SKILLS)))
    units: list[dict] = field(default_factory=list)
    generator: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if self.frames_per_skill % self.segment_length:
            raise ValueError(
                f"frames per skill ({self.frames_per_skill}) must be a multiple of "
                f"the {self.segment_length}-frame segment"
            )


@dataclass
class Dataset:
    manifest: DatasetManifest
    recordings: list[SkillRecording]

    @property
    def subjects(self) -> list[str]:
        """Subjects with loaded recordings, in manifest order."""
        have = {r.subject for r in self.recordings}
        return [s for s in self.manifest.subjects if s in have]

    def recording(self, subject: str, skill: int) -> SkillRecording:
        for r in self.recordings:
            if r.subject == subject and r.skill == skill:
                return r
        raise KeyError(f"no recording for subject {subject!r}, skill {skill}")

    def for_subject(self, subject: str) -> list[SkillRecording]:
        return sorted((r for r in self.recordings if r.subject == subject), key=lambda r: r.skill)

    def iter_frames(self) -> Iterator[FrameRecord]:
        for r in self.recordings:
            for i in range(len(r)):
                yield r.frame(i)


# --- phantom generator -----------------------------------------------------

BLOB_SIGMA_FRAC = 0.07
RING_RADIUS_FRAC = 0.28
SUBJECT_JITTER_FRAC = 0.03
SENSOR_NOISE_N = 0.05
BLOB_BASE = 0.25
BLOB_GAIN = 0.5
TISSUE_LEVEL = 0.22
_SUBJECT_STREAM = 255  # seed-stream tag for per-subject anatomy; skills use 0..4


def anchor_positions(image_size: int, rng: np.random.Generator) -> np.ndarray:
    """Five blob sites on a ring around the image centre, jittered per subject."""
    angles = np.pi / 2 + 2 * np.pi * np.arange(NUM_SKILLS) / NUM_SKILLS
    pos = 0.5 + RING_RADIUS_FRAC * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    pos = pos + rng.uniform(-SUBJECT_JITTER_FRAC, SUBJECT_JITTER_FRAC, size=pos.shape)
    return pos * image_size


def skill_sites(skill: int) -> tuple[int, int]:
    """Each skill lights two neighbouring ring sites."""
    return skill, (skill + 1) % NUM_SKILLS


def _gaussian(size: int, centre, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) + 0.5
    dy = (r - centre[0])[:, None]
    dx = (r - centre[1])[None, :]
    return np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))


def _tissue(size: int, rng: np.random.Generator) -> np.ndarray:
    # Smooth background with a few horizontal fascia-like bands.
    r = (np.arange(size) + 0.5) / size
    base = TISSUE_LEVEL * (1.0 - 0.35 * r)[:, None] * np.ones((1, size))
    for _ in range(3):
        y0, w = rng.uniform(0.1, 0.9), rng.uniform(0.01, 0.03)
        base += 0.08 * np.exp(-((r - y0) ** 2) / (2 * w * w))[:, None]
    return base


def _unit_rng(seed: int, subject_idx: int, skill: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, subject_idx, skill])))


def subject_id(i: int) -> str:
    return f"S{i + 1:02d}"


def synth_generate(subjects: int, peak_range: Sequence[float] = (1.0, 4.0), image_size: int = 64,
                   noise_level: float = 0.5, seed: int = 0,
                   frames_per_skill: int = FRAMES_PER_SKILL,
                   skills: Sequence[int] = tuple(range(NUM_SKILLS))) -> Dataset:
    """Deterministic phantom dataset; every (subject, skill) unit has its own seed stream."""
    lo, hi = (float(v) for v in peak_range)
    if subjects < 1:
        raise ValueError("need at least one subject")
    if not 0.0 < lo <= hi <= SENSOR_MAX_N:
        raise ValueError(f"peak range must satisfy 0 < lo <= hi <= {SENSOR_MAX_N}, got {peak_range}")
    if image_size < 32:
        raise ValueError("image_size must be at least 32")
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError("noise_level must be in [0, 1]")
    if frames_per_skill <= 0 or frames_per_skill % SEGMENT_LENGTH:
        raise ValueError(f"frames_per_skill must be a positive multiple of {SEGMENT_LENGTH}")
    if any(not 0 <= k < NUM_SKILLS for k in skills):
        raise ValueError(f"skills must be in 0..{NUM_SKILLS - 1}")

    sigma = BLOB_SIGMA_FRAC * image_size
    recordings = []
    units = []
    names = []
    for s in range(subjects):
        sid = subject_id(s)
        names.append(sid)
        srng = _unit_rng(seed, s, _SUBJECT_STREAM)
        sites = anchor_positions(image_size, srng)
        tissue = _tissue(image_size, srng)
        for k in skills:
            rng = _unit_rng(seed, s, k)
            anchors = sites[list(skill_sites(k))]
            blob = sum(_gaussian(image_size, a, sigma) for a in anchors)
            n_seg = frames_per_skill // SEGMENT_LENGTH
            peaks = rng.uniform(lo, hi, size=n_seg)
            offsets = np.arange(frames_per_skill)
            true_force = np.array([ForceProfile(peaks[i // SEGMENT_LENGTH]).value(i) for i in offsets])
            noise = rng.uniform(-SENSOR_NOISE_N, SENSOR_NOISE_N, size=frames_per_skill)
            labels = np.clip(true_force + noise, 0.0, SENSOR_MAX_N).astype(np.float32)
            frames = np.empty((frames_per_skill, image_size, image_size, 1), np.float32)
            chunk = max(1, 2**22 // (image_size * image_size))
            for c0 in range(0, frames_per_skill, chunk):
                c1 = min(frames_per_skill, c0 + chunk)
                amp = BLOB_BASE + BLOB_GAIN * true_force[c0:c1] / SENSOR_MAX_N
                clean = tissue[None] + amp[:, None, None] * blob[None]
                speckle = rng.rayleigh(1.0, size=clean.shape) / np.sqrt(np.pi / 2)
                img = clean * (1.0 + noise_level * (speckle - 1.0))
                raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                frames[c0:c1] = normalize_image(raw)
            recordings.append(SkillRecording(sid, int(k), frames, labels, anchors, 2 * sigma))
            units.append(dict(subject=sid, skill=int(k), frames=frames_per_skill,
                              path_frames=f"{sid}/skill{k}/frames.npy",
                              path_forces=f"{sid}/skill{k}/forces.npy",
                              anchors=anchors.round(6).tolist(), blob_radius=2 * sigma,
                              peaks=peaks.round(6).tolist()))
    manifest = DatasetManifest(
        subjects=names, image_size=image_size, frames_per_skill=frames_per_skill,
        skills=[int(k) for k in skills], units=units,
        generator=dict(kind="phantom", seed=int(seed), peak_range=[lo, hi],
                       noise_level=float(noise_level)),
    )
    return Dataset(manifest, recordings)


def blob_mask(recording: SkillRecording, image_size: int) -> np.ndarray:
    """Boolean (H, W) union of the planted blob disks."""
    if recording.anchors is None:
        raise ValueError("recording has no planted blobs")
    r = np.arange(image_size) + 0.5
    mask = np.zeros((image_size, image_size), bool)
    for cy, cx in recording.anchors:
        mask |= ((r[:, None] - cy) ** 2 + (r[None, :] - cx) ** 2) <= recording.blob_radius ** 2
    return mask


def site_mean_classifier(frames: np.ndarray, sites: np.ndarray, radius: float) -> np.ndarray:
    """Predict the skill whose two sites have the brightest mean pixels."""
    size = frames.shape[1]
    r = np.arange(size) + 0.5
    means = []
    for cy, cx in sites:
        disk = ((r[:, None] - cy) ** 2 + (r[None, :] - cx) ** 2) <= radius ** 2
        means.append(frames[..., 0][:, disk].mean(axis=1))
    means = np.stack(means, axis=1)
    scores = np.stack([means[:, a] + means[:, b] for a, b in map(skill_sites, range(NUM_SKILLS))], axis=1)
    return scores.argmax(axis=1)


# --- splits ----------------------------------------------------------------

def train_count(n: int) -> int:
    return int(round(n * TRAIN_FRACTION))


def split_train_test(recordings: Sequence[SkillRecording]):
    """Per skill, the first 80% of frames train and the rest test (order kept)."""
    train, test = [], []
    for r in recordings:
        if len(r) % SEGMENT_LENGTH:
            raise ValueError(f"recording {r.subject}/skill{r.skill} has {len(r)} frames, "
                             f"not a multiple of {SEGMENT_LENGTH}")
        cut = train_count(len(r))
        train.append(SkillRecording(r.subject, r.skill, r.frames[:cut], r.forces[:cut], r.anchors, r.blob_radius))
        test.append(SkillRecording(r.subject, r.skill, r.frames[cut:], r.forces[cut:], r.anchors, r.blob_radius))
    return train, test


def fold_indices(n: int, fold: int, folds: int = 5, mode: str = "rotating"):
    """(train_idx, test_idx) of fold ``fold`` (0-based) over ``n`` ordered samples.

    ``rotating``: test is the fold's contiguous block, so each sample is tested
    once across folds.  ``fixed``: every fold uses the first-80/last-20 split.
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if not 0 <= fold < folds:
        raise ValueError(f"fold {fold} out of range for {folds} folds")
    if n < folds:
        raise ValueError(f"{n} samples cannot fill {folds} folds")
    idx = np.arange(n)
    if mode == "fixed":
        cut = train_count(n)
        return idx[:cut], idx[cut:]
    if mode != "rotating":
        raise ValueError(f"unknown fold mode {mode!r}")
    lo, hi = fold * n // folds, (fold + 1) * n // folds
    return np.concatenate([idx[:lo], idx[hi:]]), idx[lo:hi]


# --- persistence -----------------------------------------------------------

def save_dataset(dataset: Dataset, root: str | os.PathLike) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for r in dataset.recordings:
        d = root / r.subject / f"skill{r.skill}"
        d.mkdir(parents=True, exist_ok=True)
        npyio.save(d / "frames.npy", r.frames)
        npyio.save(d / "forces.npy", r.forces)
    with open(root / MANIFEST_NAME, "w") as fh:
        json.dump(asdict(dataset.manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


def load_manifest(root: str | os.PathLike) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return DatasetManifest(**json.load(fh))


def load_dataset(root: str | os.PathLike, subjects: Sequence[str] | None = None,
                 skills: Sequence[int] | None = None) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    recordings = []
    for unit in manifest.units:
        if subjects is not None and unit["subject"] not in subjects:
            continue
        if skills is not None and unit["skill"] not in skills:
            continue
        frames = npyio.load(root / unit["path_frames"])
        forces = npyio.load(root / unit["path_forces"])
        anchors = np.asarray(unit["anchors"]) if unit.get("anchors") is not None else None
        recordings.append(SkillRecording(unit["subject"], int(unit["skill"]), frames, forces,
                                         anchors, unit.get("blob_radius")))
    return Dataset(manifest, recordings)
