"""Synthetic multi-polarization FLGPR lanes and their on-disk format.

A lane is a strip of ground ``width_m`` across and ``length_m`` down-track.
The sensor sweeps it in overlapping frames (default 6 m deep, one every
2 m) so each ground point is imaged about three times. Pixels are complex:
circular Gaussian speckle plus coherent anisotropic Gaussian bumps for
buried targets and for clutter objects.

Coordinates: rows run down-track (northing grows with row index), columns
run cross-track (easting grows with column index); pixel ``(r, c)`` of a
frame is centred at ``origin + (c, r) * resolution``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = ("HH", "VV", "VH")

LANE_MAGIC = b"FLGPRLN\x00"
LANE_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sIIdddd")


class InvalidSpecError(ValueError):
    """A lane specification that cannot be generated."""


class LaneFormatError(ValueError):
    """A lane file with a bad magic, version or header."""


class TruncatedFileError(OSError):
    """A lane or record file that ends before its declared payload."""


@dataclass(frozen=True)
class SignatureParams:
    """Generator knobs the field data never pinned down.

    Object sizes are full widths at half maximum along each principal axis.
    SNRs are peak amplitude over speckle RMS, in dB.
    """

    target_size_m: tuple[float, float] = (0.35, 0.5)
    target_aspect: tuple[float, float] = (0.7, 1.0)
    clutter_size_m: tuple[float, float] = (0.35, 0.5)
    clutter_aspect: tuple[float, float] = (0.7, 1.0)
    clutter_snr_db: tuple[float, float] = (0.0, 6.0)
    clutter_bright_snr_db: tuple[float, float] = (12.0, 18.0)
    metal_gain_db: float = 2.0
    metal_fraction: float = 90 / 245
    noise_rms: float = 1.0
    edge_margin_m: float = 1.5
    min_separation_m: float = 2.0
    frame_length_m: float = 6.0
    resolution_m: float = 0.03
    standoff_m: float = 5.0
    origin_utm: tuple[float, float] = (500000.0, 3600000.0)


DEFAULT_SNR = {"HH": (13.5, 19.5), "VV": (12.5, 18.5), "VH": (11.5, 17.5)}
# chance that a clutter object is bright (target-like) in a given channel, drawn
# independently per channel. Clutter shares the target size range, so amplitude
# is the main cue and the channels disagree on which clutter looks like a target.
DEFAULT_BRIGHT_CLUTTER = {"HH": 0.25, "VV": 0.4, "VH": 0.55}


@dataclass(frozen=True)
class LaneSpec:
    lane_id: str
    length_m: float
    width_m: float
    n_targets: int
    target_snr_range: dict = field(default_factory=lambda: dict(DEFAULT_SNR))
    clutter_density: float = 0.05
    clutter_bright_prob: dict = field(default_factory=lambda: dict(DEFAULT_BRIGHT_CLUTTER))
    frame_spacing_m: float = 2.0
    seed: int = 0
    n_metal: int | None = None
    channels: tuple = CHANNELS
    signature: SignatureParams = field(default_factory=SignatureParams)

    def validate(self):
        sig = self.signature
        if not (self.length_m > 0 and self.width_m > 0):
            raise InvalidSpecError(
                f"lane {self.lane_id!r}: length_m and width_m must be positive")
        if self.n_targets < 0:
            raise InvalidSpecError(f"lane {self.lane_id!r}: n_targets must be >= 0")
        if self.frame_spacing_m <= 0:
            raise InvalidSpecError(f"lane {self.lane_id!r}: frame_spacing_m must be positive")
        if sig.resolution_m <= 0:
            raise InvalidSpecError(f"lane {self.lane_id!r}: resolution_m must be positive")
        if sig.frame_length_m < 2 * self.frame_spacing_m:
            raise InvalidSpecError(
                f"lane {self.lane_id!r}: frame_length_m must be at least twice "
                "frame_spacing_m so every point is seen twice")
        if self.clutter_density < 0:
            raise InvalidSpecError(f"lane {self.lane_id!r}: clutter_density must be >= 0")
        for ch in self.channels:
            if ch not in CHANNELS:
                raise InvalidSpecError(f"unknown channel {ch!r}")
            if ch not in self.target_snr_range:
                raise InvalidSpecError(f"no target_snr_range for channel {ch}")
            if not 0.0 <= self.clutter_bright_prob.get(ch, 0.0) <= 1.0:
                raise InvalidSpecError(f"clutter_bright_prob[{ch}] must lie in [0, 1]")
        if self.n_metal is not None and not 0 <= self.n_metal <= self.n_targets:
            raise InvalidSpecError("n_metal must lie in [0, n_targets]")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sig = d.pop("signature", None) or {}
        sig = SignatureParams(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in sig.items()})
        snr = {k: tuple(v) for k, v in d.pop("target_snr_range").items()}
        return cls(target_snr_range=snr, channels=tuple(d.pop("channels", CHANNELS)),
                   signature=sig, **d)


@dataclass(eq=False)
class Frame:
    channel: str
    pixels: np.ndarray
    resolution_m: float = 0.03
    origin_utm: tuple[float, float] = (0.0, 0.0)
    standoff_m: float = 5.0

    @property
    def shape(self):
        return self.pixels.shape

    def pixel_to_utm(self, rows, cols):
        rows = np.asarray(rows, dtype=np.float64)
        cols = np.asarray(cols, dtype=np.float64)
        return (self.origin_utm[0] + cols * self.resolution_m,
                self.origin_utm[1] + rows * self.resolution_m)

    def utm_to_pixel(self, easting, northing):
        """Fractional (row, col) of a UTM position."""
        easting = np.asarray(easting, dtype=np.float64)
        northing = np.asarray(northing, dtype=np.float64)
        return ((northing - self.origin_utm[1]) / self.resolution_m,
                (easting - self.origin_utm[0]) / self.resolution_m)

    @property
    def center_northing(self):
        return self.origin_utm[1] + 0.5 * (self.pixels.shape[0] - 1) * self.resolution_m

    @property
    def sensor_northing(self):
        """Vehicle position: the frame centre lies ``standoff_m`` ahead."""
        return self.center_northing - self.standoff_m

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.channel == other.channel
                and self.resolution_m == other.resolution_m
                and tuple(self.origin_utm) == tuple(other.origin_utm)
                and self.standoff_m == other.standoff_m
                and self.pixels.dtype == other.pixels.dtype
                and self.pixels.shape == other.pixels.shape
                and self.pixels.tobytes() == other.pixels.tobytes())


@dataclass(frozen=True)
class GroundTruthTarget:
    target_id: str
    utm: tuple[float, float]
    metal_class: str


@dataclass(eq=False)
class Lane:
    spec: LaneSpec
    frames: dict
    truth: list

    @property
    def origin_utm(self):
        return tuple(self.spec.signature.origin_utm)

    @property
    def grid_shape(self):
        """Lane extent in whole pixels (down-track rows, cross-track cols)."""
        res = self.spec.signature.resolution_m
        return (int(round(self.spec.length_m / res)), int(round(self.spec.width_m / res)))

    @property
    def area_m2(self):
        res = self.spec.signature.resolution_m
        rows, cols = self.grid_shape
        return rows * cols * res * res

    @property
    def bounds(self):
        """((e_min, e_max), (n_min, n_max)) of the scored lane area."""
        res = self.spec.signature.resolution_m
        rows, cols = self.grid_shape
        e0, n0 = self.origin_utm
        return (e0, e0 + cols * res), (n0, n0 + rows * res)

    def contains(self, easting, northing):
        (e0, e1), (n0, n1) = self.bounds
        easting = np.asarray(easting)
        northing = np.asarray(northing)
        return (easting >= e0) & (easting < e1) & (northing >= n0) & (northing < n1)

    @property
    def channels(self):
        return tuple(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Lane):
            return NotImplemented
        return (self.spec == other.spec
                and list(self.frames) == list(other.frames)
                and all(len(self.frames[c]) == len(other.frames[c])
                        and all(a == b for a, b in zip(self.frames[c], other.frames[c]))
                        for c in self.frames)
                and self.truth == other.truth)


@dataclass(frozen=True)
class _Blob:
    easting: float
    northing: float
    sigma_major: float
    sigma_minor: float
    angle: float
    amplitude: dict
    phase: dict


_FWHM = 2.0 * np.sqrt(2.0 * np.log(2.0))


def _place(rng, n, spec, taken):
    sig = spec.signature
    e0, n0 = sig.origin_utm
    m = sig.edge_margin_m
    lo_e, hi_e = e0 + min(m, spec.width_m / 2), e0 + spec.width_m - min(m, spec.width_m / 2)
    lo_n, hi_n = n0 + min(m, spec.length_m / 2), n0 + spec.length_m - min(m, spec.length_m / 2)
    out = []
    for _ in range(n):
        for _attempt in range(200):
            p = (rng.uniform(lo_e, hi_e) if hi_e > lo_e else lo_e,
                 rng.uniform(lo_n, hi_n) if hi_n > lo_n else lo_n)
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= sig.min_separation_m ** 2
                   for q in taken):
                break
        taken.append(p)
        out.append(p)
    return out


def _blob(rng, pos, size_range, aspect_range, snr_ranges, gain_db, channels, noise_rms,
          bright=None):
    """One Gaussian scatterer; ``bright`` maps a channel to ``(prob, snr_range)``
    replacing ``snr_ranges[ch]`` with that probability."""
    major = rng.uniform(*size_range) / _FWHM
    minor = major * rng.uniform(*aspect_range)
    angle = rng.uniform(0, np.pi)
    amp = {}
    phase = {}
    for ch in channels:
        rng_ch = snr_ranges[ch]
        if bright is not None:
            prob, alt = bright[ch]
            if rng.uniform() < prob:
                rng_ch = alt
        snr = rng.uniform(*rng_ch) + gain_db
        amp[ch] = noise_rms * 10.0 ** (snr / 20.0)
        phase[ch] = rng.uniform(0, 2 * np.pi)
    return _Blob(pos[0], pos[1], major, minor, angle, amp, phase)


def _frame_origins(spec):
    sig = spec.signature
    e0, n0 = sig.origin_utm
    start = n0 - (sig.frame_length_m - spec.frame_spacing_m)
    out = []
    k = 0
    while True:
        on = start + k * spec.frame_spacing_m
        if on >= n0 + spec.length_m:
            break
        out.append((e0, on))
        k += 1
    return out


def _render(frame_px, origin, res, blob, ch):
    rows, cols = frame_px.shape
    reach = 4.0 * blob.sigma_major
    r_lo = int(np.floor((blob.northing - reach - origin[1]) / res))
    r_hi = int(np.ceil((blob.northing + reach - origin[1]) / res)) + 1
    c_lo = int(np.floor((blob.easting - reach - origin[0]) / res))
    c_hi = int(np.ceil((blob.easting + reach - origin[0]) / res)) + 1
    r_lo, r_hi = max(r_lo, 0), min(r_hi, rows)
    c_lo, c_hi = max(c_lo, 0), min(c_hi, cols)
    if r_lo >= r_hi or c_lo >= c_hi:
        return
    dn = origin[1] + np.arange(r_lo, r_hi) * res - blob.northing
    de = origin[0] + np.arange(c_lo, c_hi) * res - blob.easting
    ca, sa = np.cos(blob.angle), np.sin(blob.angle)
    u = de[None, :] * ca + dn[:, None] * sa
    v = -de[None, :] * sa + dn[:, None] * ca
    g = np.exp(-0.5 * ((u / blob.sigma_major) ** 2 + (v / blob.sigma_minor) ** 2))
    frame_px[r_lo:r_hi, c_lo:c_hi] += blob.amplitude[ch] * np.exp(1j * blob.phase[ch]) * g


def generate_lane(spec: LaneSpec) -> Lane:
    """Generate a lane; a pure function of ``spec`` (including its seed)."""
    spec.validate()
    sig = spec.signature
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    taken = []
    target_pos = _place(rng, spec.n_targets, spec, taken)
    n_metal = (spec.n_metal if spec.n_metal is not None
               else int(round(sig.metal_fraction * spec.n_targets)))
    metal = np.zeros(spec.n_targets, dtype=bool)
    metal[rng.permutation(spec.n_targets)[:n_metal]] = True

    truth = []
    blobs = []
    for i, pos in enumerate(target_pos):
        gain = sig.metal_gain_db if metal[i] else 0.0
        blobs.append(_blob(rng, pos, sig.target_size_m, sig.target_aspect,
                           spec.target_snr_range, gain, spec.channels, sig.noise_rms))
        truth.append(GroundTruthTarget(f"{spec.lane_id}-T{i:03d}", (float(pos[0]), float(pos[1])),
                                       "metal" if metal[i] else "low-metal"))
    n_clutter = int(round(spec.clutter_density * spec.length_m * spec.width_m))
    clutter_snr = {ch: sig.clutter_snr_db for ch in spec.channels}
    bright = {ch: (spec.clutter_bright_prob.get(ch, 0.0), sig.clutter_bright_snr_db)
              for ch in spec.channels}
    for pos in _place(rng, n_clutter, spec, taken):
        blobs.append(_blob(rng, pos, sig.clutter_size_m, sig.clutter_aspect,
                           clutter_snr, 0.0, spec.channels, sig.noise_rms, bright))

    res = sig.resolution_m
    n_rows = int(round(sig.frame_length_m / res))
    n_cols = int(round(spec.width_m / res))
    origins = _frame_origins(spec)
    frames = {}
    for ci, ch in enumerate(CHANNELS):
        if ch not in spec.channels:
            continue
        out = []
        for fi, origin in enumerate(origins):
            frng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, ci, fi]))
            noise = frng.standard_normal((n_rows, n_cols, 2)) * (sig.noise_rms / np.sqrt(2.0))
            px = noise[..., 0] + 1j * noise[..., 1]
            top, bottom = origin[1], origin[1] + n_rows * res
            for b in blobs:
                if b.northing + 4 * b.sigma_major >= top and b.northing - 4 * b.sigma_major <= bottom:
                    _render(px, origin, res, b, ch)
            out.append(Frame(ch, px.astype(np.complex64), res, origin, sig.standoff_m))
        frames[ch] = out
    return Lane(spec, frames, truth)


FIELD_LANES = (
    # lane, area m^2, unique targets, metal
    ("A", 3943.0, 28, 9),
    ("B", 3610.0, 23, 9),
    ("C", 2961.0, 27, 10),
)


def field_lane_specs(seed=0, width_m=6.0, scale=1.0, **overrides):
    """Three lane specs sized like the field lanes (area and target counts).

    ``scale`` shrinks the areas and target counts together for quick runs.
    """
    specs = []
    for i, (name, area, n_t, n_m) in enumerate(FIELD_LANES):
        n_t_s = max(1, int(round(n_t * scale)))
        specs.append(LaneSpec(
            lane_id=name,
            length_m=area * scale / width_m,
            width_m=width_m,
            n_targets=n_t_s,
            n_metal=int(round(n_m * n_t_s / n_t)),
            seed=seed * 1000 + i,
            **overrides,
        ))
    return specs


# -- binary lane files --------------------------------------------------------

def truth_path(path):
    path = Path(path)
    return path.with_name(path.name + ".truth.csv")


def write_truth_csv(truth, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_id", "easting_m", "northing_m", "metal_class"])
        for t in truth:
            w.writerow([t.target_id, repr(float(t.utm[0])), repr(float(t.utm[1])), t.metal_class])


def read_truth_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [GroundTruthTarget(r["target_id"], (float(r["easting_m"]), float(r["northing_m"])),
                              r["metal_class"]) for r in rows]


def write_lane(lane: Lane, path) -> None:
    """Write ``lane`` as a little-endian binary file plus a truth CSV sidecar.

    Layout: magic (8 bytes), version u32, spec-JSON length u32, spec JSON
    (UTF-8), frame count u32, then per frame a header (channel as 4 ASCII
    bytes, rows u32, cols u32, resolution f64, origin easting f64, origin
    northing f64, standoff f64) followed by rows*cols interleaved float32
    (re, im) pairs in row-major order.
    """
    path = Path(path)
    spec_json = json.dumps(lane.spec.to_dict(), sort_keys=True).encode()
    frames = [f for ch in lane.frames for f in lane.frames[ch]]
    with open(path, "wb") as fh:
        fh.write(LANE_MAGIC)
        fh.write(struct.pack("<II", LANE_VERSION, len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<I", len(frames)))
        for f in frames:
            rows, cols = f.pixels.shape
            fh.write(_FRAME_HEADER.pack(f.channel.encode().ljust(4, b"\x00"), rows, cols,
                                        f.resolution_m, f.origin_utm[0], f.origin_utm[1],
                                        f.standoff_m))
            fh.write(np.ascontiguousarray(f.pixels, dtype="<c8").tobytes())
    write_truth_csv(lane.truth, truth_path(path))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_lane(path) -> Lane:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(LANE_MAGIC))
        if magic != LANE_MAGIC:
            raise LaneFormatError(f"{path}: not a lane file (bad magic {magic!r})")
        version, n_json = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != LANE_VERSION:
            raise LaneFormatError(f"{path}: unsupported lane version {version}")
        try:
            spec = LaneSpec.from_dict(json.loads(_read_exact(fh, n_json, "spec")))
        except (ValueError, TypeError, KeyError) as exc:
            raise LaneFormatError(f"{path}: corrupt lane spec header ({exc})") from exc
        (n_frames,) = struct.unpack("<I", _read_exact(fh, 4, "frame count"))
        frames = {}
        for _ in range(n_frames):
            ch, rows, cols, res, oe, on, standoff = _FRAME_HEADER.unpack(
                _read_exact(fh, _FRAME_HEADER.size, "frame header"))
            ch = ch.rstrip(b"\x00").decode()
            if ch not in CHANNELS:
                raise LaneFormatError(f"{path}: unknown channel {ch!r}")
            px = np.frombuffer(_read_exact(fh, rows * cols * 8, "frame payload"), dtype="<c8")
            frames.setdefault(ch, []).append(
                Frame(ch, px.reshape(rows, cols).astype(np.complex64), res, (oe, on), standoff))
    truth = read_truth_csv(truth_path(path))
    return Lane(spec, frames, truth)
