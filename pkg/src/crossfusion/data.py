"""Feature-bag container format, label manifest, synthetic generator, K-fold splits.

On-disk layout of a bag (all little-endian):

    magic "XFBAG1" | version u8=1 | reserved u8=0 | d_in u32
    then for each scale in order coarse, source, fine:
        N u32 | N*d_in float32 features (row-major) | N*2 int32 coords

Features are stored as float32 and widened to float64 in memory, so a
write -> read -> write round trip is byte-identical. Survival labels live in
the tab-separated manifest, not in the bag file.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, ManifestError
from .survival import SurvivalLabel

BAG_MAGIC = b"XFBAG1"
BAG_VERSION = 1

SCALES = ("coarse", "source", "fine")


@dataclass
class FeatureBag:
    slide_id: str
    coarse: np.ndarray  # [N_c, d_in] float64
    source: np.ndarray  # [N_s, d_in]
    fine: np.ndarray  # [N_f, d_in]
    coarse_coords: np.ndarray  # [N_c, 2] int32 grid positions
    source_coords: np.ndarray
    fine_coords: np.ndarray
    label: SurvivalLabel | None = None

    @property
    def d_in(self) -> int:
        return self.coarse.shape[1]

    def features(self, scale: str) -> np.ndarray:
        return getattr(self, scale)

    def coords(self, scale: str) -> np.ndarray:
        return getattr(self, f"{scale}_coords")


@dataclass
class ManifestRecord:
    slide_id: str
    event_time: float
    event: int
    bag_path: str


@dataclass
class SynthConfig:
    n_slides: int
    d_in: int = 16
    mean_coarse: float = 9.0
    mean_source: float = 35.0
    mean_fine: float = 135.0
    signal_mode: str = "multi_scale"  # multi_scale | single_scale | none
    censor_rate: float = 0.3
    seed: int = 0
    t_max: float = 3650.0

    def __post_init__(self):
        if not 0.0 <= self.censor_rate < 1.0:
            raise ConfigError(f"censor_rate must be in [0, 1), got {self.censor_rate}")
        if self.signal_mode not in ("multi_scale", "single_scale", "none"):
            raise ConfigError(f"unknown signal_mode {self.signal_mode!r}")
        if self.signal_mode != "none" and self.d_in < 3:
            raise ConfigError("planted signals need d_in >= 3")
        if self.n_slides < 1:
            raise ConfigError("n_slides must be positive")


# -- binary container -----------------------------------------------------------


def write_bag(bag: FeatureBag, path) -> None:
    for scale in SCALES:
        if bag.features(scale).shape[0] < 1:
            raise InputError(f"scale {scale!r} has no patches")
    with open(path, "wb") as f:
        f.write(BAG_MAGIC)
        f.write(struct.pack("<BB", BAG_VERSION, 0))
        f.write(struct.pack("<I", bag.d_in))
        for scale in SCALES:
            feats = bag.features(scale)
            coords = bag.coords(scale)
            f.write(struct.pack("<I", feats.shape[0]))
            f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(coords, dtype="<i4").tobytes())


def read_bag(path) -> FeatureBag:
    blob = Path(path).read_bytes()
    if blob[: len(BAG_MAGIC)] != BAG_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)
    pos = len(BAG_MAGIC)

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated {what} in {path}", offset=pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, _reserved = struct.unpack("<BB", need(2, "header"))
    if version != BAG_VERSION:
        raise FormatError(f"unsupported version {version} in {path}", offset=len(BAG_MAGIC))
    (d_in,) = struct.unpack("<I", need(4, "header"))
    fields: dict[str, np.ndarray] = {}
    for scale in SCALES:
        (n,) = struct.unpack("<I", need(4, f"{scale} patch count"))
        feat_bytes = need(4 * n * d_in, f"{scale} feature block")
        feats = np.frombuffer(feat_bytes, dtype="<f4").reshape(n, d_in)
        coord_bytes = need(8 * n, f"{scale} coordinate block")
        coords = np.frombuffer(coord_bytes, dtype="<i4").reshape(n, 2)
        fields[scale] = feats.astype(np.float64)
        fields[f"{scale}_coords"] = coords.astype(np.int32)
    if pos != len(blob):
        raise FormatError(f"trailing bytes in {path}", offset=pos)
    return FeatureBag(slide_id=Path(path).stem, label=None, **fields)


# -- manifest ---------------------------------------------------------------------


def read_manifest(path) -> list[ManifestRecord]:
    """Tab-separated records: slide_id, time (decimal days), event (0/1), bag path."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            slide_id, time_s, event_s, bag_path = parts
            try:
                event_time = float(time_s)
            except ValueError:
                raise ManifestError(f"bad time value {time_s!r}", lineno) from None
            if event_s not in ("0", "1"):
                raise ManifestError(f"event must be 0 or 1, got {event_s!r}", lineno)
            records.append(ManifestRecord(slide_id, event_time, int(event_s), bag_path))
    return records


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# slide_id\ttime\tevent\tbag_path\n")
        for r in records:
            f.write(f"{r.slide_id}\t{r.event_time!r}\t{r.event}\t{r.bag_path}\n")


def load_dataset(manifest_path) -> list[FeatureBag]:
    """Read every bag named by the manifest and attach its survival label."""
    base = Path(manifest_path).parent
    bags = []
    for rec in read_manifest(manifest_path):
        bag = read_bag(base / rec.bag_path)
        bag.slide_id = rec.slide_id
        bag.label = SurvivalLabel(event_time=rec.event_time, event=rec.event)
        bags.append(bag)
    return bags


# -- synthetic generator -----------------------------------------------------------


def _grid_coords(n: int) -> np.ndarray:
    w = math.isqrt(n)
    if w * w < n:
        w += 1
    idx = np.arange(n)
    return np.stack([idx % w, idx // w], axis=1).astype(np.int32)


def _signal_blocks(d_in: int) -> tuple[slice, slice, slice]:
    b = min(4, max(1, d_in // 3))
    return slice(0, b), slice(b, 2 * b), slice(2 * b, 3 * b)


def synth_generate(cfg: SynthConfig) -> tuple[list[FeatureBag], list[ManifestRecord]]:
    """Draw slides with a latent risk z in (0, 1); higher z means shorter survival.

    In multi_scale mode each magnification carries an independently noised view
    of z in its own coordinate block: a global offset on coarse patches, a
    sign-alternating motif on a z-proportional fraction of source patches, and
    a few high-amplitude spikes on fine patches. single_scale plants all three
    on the fine patches; none plants nothing.
    """
    rng = np.random.default_rng(cfg.seed)
    blk_a, blk_b, blk_c = _signal_blocks(cfg.d_in)
    motif = np.zeros(blk_b.stop - blk_b.start)
    motif[0::2] = 1.0
    motif[1::2] = -1.0

    bags: list[FeatureBag] = []
    records: list[ManifestRecord] = []
    for i in range(cfg.n_slides):
        slide_id = f"s{i:04d}"
        z = rng.uniform(0.0, 1.0)
        t_event = cfg.t_max * (1.0 - z) * math.exp(rng.normal(0.0, 0.1))
        if rng.uniform() < cfg.censor_rate:
            observed = rng.uniform(0.0, t_event)
            event = 0
        else:
            observed = t_event
            event = 1

        counts = {
            "coarse": max(1, int(rng.poisson(cfg.mean_coarse))),
            "source": max(1, int(rng.poisson(cfg.mean_source))),
            "fine": max(1, int(rng.poisson(cfg.mean_fine))),
        }
        feats = {s: rng.standard_normal((counts[s], cfg.d_in)) for s in SCALES}

        if cfg.signal_mode != "none":
            z_a = z + rng.normal(0.0, 0.15)
            z_b = float(np.clip(z + rng.normal(0.0, 0.12), 0.0, 1.0))
            z_c = float(np.clip(z + rng.normal(0.0, 0.12), 0.0, 1.0))
            offset_target = "coarse" if cfg.signal_mode == "multi_scale" else "fine"
            motif_target = "source" if cfg.signal_mode == "multi_scale" else "fine"
            feats[offset_target][:, blk_a] += 2.5 * z_a
            n_tgt = counts[motif_target]
            n_motif = int(round((0.15 + 0.7 * z_b) * n_tgt))
            if n_motif > 0:
                chosen = rng.choice(n_tgt, size=min(n_motif, n_tgt), replace=False)
                feats[motif_target][np.ix_(chosen, range(blk_b.start, blk_b.stop))] += 2.5 * motif
            n_spike = 1 + int(z_c * 6.999)
            chosen = rng.choice(counts["fine"], size=min(n_spike, counts["fine"]), replace=False)
            feats["fine"][np.ix_(chosen, range(blk_c.start, blk_c.stop))] += 2.0 + 3.0 * z_c

        # Values must be exactly float32-representable for lossless round trips.
        feats = {s: v.astype(np.float32).astype(np.float64) for s, v in feats.items()}
        bag = FeatureBag(
            slide_id=slide_id,
            coarse=feats["coarse"],
            source=feats["source"],
            fine=feats["fine"],
            coarse_coords=_grid_coords(counts["coarse"]),
            source_coords=_grid_coords(counts["source"]),
            fine_coords=_grid_coords(counts["fine"]),
            label=SurvivalLabel(event_time=observed, event=event),
        )
        bags.append(bag)
        records.append(ManifestRecord(slide_id, observed, event, f"bags/{slide_id}.xfb"))
    return bags, records


# -- cross-validation splits ---------------------------------------------------------


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle then contiguous chunking into k disjoint validation folds."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    base = n // k
    extra = n % k
    splits = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        val = perm[start : start + size]
        train = np.concatenate([perm[:start], perm[start + size :]])
        splits.append((np.sort(train), np.sort(val)))
        start += size
    return splits
