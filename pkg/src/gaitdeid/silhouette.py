"""Silhouette-domain transforms, the synthetic walker corpus, and sequence I/O."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffcore as dc

THRESHOLD = 0.5
GRAY_EPS = 0.01
DEFAULT_SHAPE = (8, 16, 16)


@dataclass
class SilhouetteSequence:
    """L x H x W intensities in [0, 1] plus optional tags."""

    frames: np.ndarray
    identity: str | None = None
    condition: str | None = None
    tilt_label: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError(f"expected L x H x W frames, got shape {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0 or not np.all(np.isfinite(f))):
            raise ValueError("silhouette intensities must lie in [0, 1]")
        self.frames = f

    @property
    def shape(self):
        return self.frames.shape

    def with_frames(self, frames, **extra):
        return SilhouetteSequence(
            frames, self.identity, self.condition, self.tilt_label, {**self.extra, **extra}
        )


@dataclass(frozen=True)
class BinarizationConfig:
    tau: float = 0.1
    threshold: float = THRESHOLD
    gray_eps: float = GRAY_EPS

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")


def _frames(x):
    return x.frames if isinstance(x, SilhouetteSequence) else np.asarray(x, dtype=np.float64)


def soft_binarize(x, tau=0.1):
    """sigmoid((x - 0.5) / tau), elementwise.

    Accepts a :class:`~gaitdeid.diffcore.Tensor` (recorded, differentiable)
    or a plain array.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if isinstance(x, dc.Tensor):
        return dc.sigmoid(dc.scale(dc.add(x, -THRESHOLD), 1.0 / tau))
    arr = _frames(x)
    return dc._sigmoid((arr - THRESHOLD) / tau)


def hard_binarize(x):
    """Threshold at 0.5; ties go to foreground."""
    return (_frames(x) >= THRESHOLD).astype(np.float64)


def gray_fraction(x, eps=GRAY_EPS):
    """Fraction of pixels strictly inside (eps, 1 - eps)."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    arr = _frames(x)
    return float(np.mean((arr > eps) & (arr < 1.0 - eps)))


def preprocess_length(x, L):
    """Centre-crop (left-biased) or cyclically repeat to exactly ``L`` frames."""
    arr = _frames(x)
    n = arr.shape[0]
    if n == 0:
        raise ValueError("sequence has no frames")
    if n >= L:
        start = (n - L) // 2
        out = arr[start:start + L]
    else:
        out = arr[np.arange(L) % n]
    if isinstance(x, SilhouetteSequence):
        return x.with_frames(out.copy())
    return out.copy()


# synthetic walkers ------------------------------------------------------------

# (low, high) bounds; lengths are fractions of the frame height/width. The
# stride frequency keeps one gait cycle close to 8 frames, so the temporal
# statistics of a sequence barely depend on where in the cycle it starts.
WALKER_BOUNDS = {
    "torso_width": (0.14, 0.30),
    "torso_height": (0.20, 0.32),
    "limb_length": (0.28, 0.46),
    "stride_freq": (0.12, 0.13),
    "tilt": (0.15, 0.35),
}
HEAD_RADIUS = 0.08
LIMB_HALF_WIDTH = 0.9
SWING = 0.6


@dataclass(frozen=True)
class WalkerIdentity:
    torso_width: float
    torso_height: float
    limb_length: float
    stride_freq: float
    phase: float
    tilt: float

    @property
    def tilt_label(self):
        return 1 if self.tilt > 0 else 0

    @classmethod
    def sample(cls, rng, min_tilt=None):
        b = WALKER_BOUNDS
        lo, hi = b["tilt"]
        if min_tilt is not None:
            lo = min_tilt
        mag = rng.uniform(lo, hi)
        return cls(
            torso_width=rng.uniform(*b["torso_width"]),
            torso_height=rng.uniform(*b["torso_height"]),
            limb_length=rng.uniform(*b["limb_length"]),
            stride_freq=rng.uniform(*b["stride_freq"]),
            phase=rng.uniform(0.0, 2 * math.pi),
            tilt=mag if rng.random() < 0.5 else -mag,
        )


def _capsule_sd(py, px, ay, ax, by, bx, radius):
    vy, vx = by - ay, bx - ax
    wy, wx = py - ay, px - ax
    vv = vy * vy + vx * vx
    t = np.clip((wy * vy + wx * vx) / vv, 0.0, 1.0) if vv > 0 else np.zeros_like(py)
    dy, dx = wy - t * vy, wx - t * vx
    return np.sqrt(dy * dy + dx * dx) - radius


def render_walker(identity, frames=8, height=16, width=16, phase_offset=0.0):
    """Anti-aliased coverage in [0, 1] (one-pixel soft edges), not binarized."""
    H, W = height, width
    py, px = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    foot_y = H - 0.8
    hip_y = foot_y - identity.limb_length * H
    hip_x = W / 2.0
    th = identity.tilt
    torso_len = identity.torso_height * H
    sh_y = hip_y - torso_len * math.cos(th)
    sh_x = hip_x + torso_len * math.sin(th)
    r_head = HEAD_RADIUS * H
    head_y = sh_y - r_head * math.cos(th)
    head_x = sh_x + r_head * math.sin(th)
    leg = identity.limb_length * H
    out = np.empty((frames, H, W))
    for k in range(frames):
        a = SWING * math.sin(2 * math.pi * identity.stride_freq * k + identity.phase + phase_offset)
        sds = [
            _capsule_sd(py, px, hip_y, hip_x, sh_y, sh_x, identity.torso_width * W / 2),
            np.hypot(py - head_y, px - head_x) - r_head,
        ]
        for s in (a, -a):
            fy = hip_y + leg * math.cos(s)
            fx = hip_x + leg * math.sin(s)
            sds.append(_capsule_sd(py, px, hip_y, hip_x, fy, fx, LIMB_HALF_WIDTH))
        sd = np.minimum.reduce(sds)
        out[k] = np.clip(0.5 - sd, 0.0, 1.0)
    return out


def synth_walker(walker, frames=8, seed=0, height=16, width=16, binarize=True, **tags):
    """Render ``walker``; the seed only shifts the gait phase."""
    offset = np.random.default_rng(seed).uniform(0.0, 2 * math.pi)
    cov = render_walker(walker, frames, height, width, phase_offset=offset)
    x = hard_binarize(cov) if binarize else cov
    return SilhouetteSequence(x, tilt_label=walker.tilt_label, **tags)


@dataclass
class Corpus:
    """Synthetic identities x sequences with a gallery/probe split."""

    identities: dict
    sequences: dict  # sequence id -> SilhouetteSequence
    split: dict  # sequence id -> "gallery" | "probe"

    def ids(self, split=None):
        return [k for k in sorted(self.sequences) if split is None or self.split[k] == split]


def gallery_count(seqs_per_id):
    # nm-01..nm-04 style: at most four enrolled, at least one probe when possible
    return 1 if seqs_per_id <= 1 else min(4, seqs_per_id - 1)


def make_corpus(n_ids=10, seqs_per_id=6, seed=0, frames=8, height=16, width=16, min_tilt=None):
    rng = np.random.default_rng(seed)
    identities, sequences, split = {}, {}, {}
    n_gal = gallery_count(seqs_per_id)
    for i in range(n_ids):
        name = f"id{i:03d}"
        ident = WalkerIdentity.sample(rng, min_tilt=min_tilt)
        identities[name] = ident
        for j in range(seqs_per_id):
            sid = f"{name}_nm-{j + 1:02d}"
            s_seed = int(rng.integers(0, 2**31))
            sequences[sid] = synth_walker(
                ident, frames, s_seed, height, width, identity=name, condition=f"nm-{j + 1:02d}"
            )
            split[sid] = "gallery" if j < n_gal else "probe"
    return Corpus(identities, sequences, split)


# disk format -------------------------------------------------------------------

def _write_pgm(path, frame):
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def save_sequence(seq, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    L, H, W = seq.shape
    for k in range(L):
        _write_pgm(d / f"frame_{k:03d}.pgm", seq.frames[k])
    manifest = {
        "identity": seq.identity,
        "condition": seq.condition,
        "tilt_label": seq.tilt_label,
        "L": L,
        "H": H,
        "W": W,
        **seq.extra,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_sequence(directory):
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{d}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    files = sorted(p for p in d.iterdir() if p.name.startswith("frame_") and p.suffix == ".pgm")
    if not files:
        raise ValueError(f"{d}: no frames")
    frames = np.stack([_read_pgm(p) for p in files])
    L, H, W = (manifest.get(k) for k in ("L", "H", "W"))
    if (L, H, W) != (None, None, None) and frames.shape != (L, H, W):
        raise ValueError(f"{d}: frames {frames.shape} disagree with manifest {(L, H, W)}")
    extra = {k: v for k, v in manifest.items() if k not in {"identity", "condition", "tilt_label", "L", "H", "W"}}
    return SilhouetteSequence(
        frames, manifest.get("identity"), manifest.get("condition"), manifest.get("tilt_label"), extra
    )


def is_sequence_dir(path):
    return os.path.isfile(os.path.join(path, "manifest.json"))


def save_corpus(corpus, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid in corpus.ids():
        seq = corpus.sequences[sid]
        save_sequence(seq, d / sid)
        entries.append({
            "id": sid,
            "identity": seq.identity,
            "condition": seq.condition,
            "tilt_label": seq.tilt_label,
            "split": corpus.split[sid],
        })
    meta = {
        "count": len(entries),
        "identities": {k: asdict(v) for k, v in sorted(corpus.identities.items())},
        "sequences": entries,
    }
    (d / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_sequence_dirs(directory, split=None):
    """Load every sequence below ``directory`` as ``{id: sequence}``.

    When a corpus.json is present and ``split`` is given, only that split is
    returned.
    """
    d = Path(directory)
    if is_sequence_dir(d):
        return {d.name: load_sequence(d)}
    chosen = None
    cpath = d / "corpus.json"
    if split is not None and cpath.exists():
        meta = json.loads(cpath.read_text())
        chosen = {e["id"] for e in meta["sequences"] if e.get("split") == split}
    out = {}
    for sub in sorted(p for p in d.iterdir() if p.is_dir()):
        if is_sequence_dir(sub) and (chosen is None or sub.name in chosen):
            out[sub.name] = load_sequence(sub)
    return out
