"""Privacy, quality and utility metrics over a gallery/probe protocol.

Retrieval is cosine similarity under one evaluation embedder. Sorting is by
descending similarity with ties broken by ascending sequence id, so every
metric is independent of gallery order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from statistics import median

import numpy as np

from .silhouette import SilhouetteSequence, hard_binarize

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
# |tilt score| below this many pixels counts as no lean; a mirror-symmetric
# walker scores ~1e-7 from the mass guards alone
TILT_TIE = 1e-3


# gallery and retrieval -----------------------------------------------------------

@dataclass
class Gallery:
    ids: list
    identities: list
    embeddings: np.ndarray  # (n, m), unit rows

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        if not len(self.ids) == len(self.identities) == len(self.embeddings):
            raise ValueError("gallery ids, identities and embeddings differ in length")
        if len(self.ids) and not np.allclose(np.linalg.norm(self.embeddings, axis=1), 1.0, atol=1e-9):
            raise ValueError("gallery embeddings must be unit norm")

    @classmethod
    def build(cls, sequences, embedder):
        """``sequences``: mapping id -> SilhouetteSequence carrying an identity."""
        ids = sorted(sequences)
        return cls(ids, [sequences[k].identity for k in ids], np.array([embedder.embed(sequences[k]) for k in ids]))

    def __len__(self):
        return len(self.ids)

    def extended(self, ids, identities, embeddings):
        """A new gallery with extra entries; ids already present are skipped."""
        seen = set(self.ids)
        keep = []
        for i, k in enumerate(ids):
            if k not in seen:
                seen.add(k)
                keep.append(i)
        if not keep:
            return self
        return Gallery(
            self.ids + [ids[i] for i in keep],
            self.identities + [identities[i] for i in keep],
            np.vstack([self.embeddings, np.asarray(embeddings)[keep]]),
        )

    def order(self, query, exclude=()):
        """Gallery indices, best match first."""
        sims = self.embeddings @ np.asarray(query, dtype=np.float64)
        idx = [i for i in range(len(self.ids)) if self.ids[i] not in exclude]
        return sorted(idx, key=lambda i: (-sims[i], self.ids[i]))

    def top1(self, query, exclude=()):
        order = self.order(query, exclude)
        if not order:
            raise ValueError("empty gallery")
        return self.ids[order[0]], self.identities[order[0]]


def rank_of(query, key, gallery, exclude=()):
    """1-based rank of sequence ``key`` for ``query``."""
    if key not in gallery.ids:
        raise KeyError(f"{key!r} not in gallery")
    if key in exclude:
        raise ValueError(f"{key!r} is excluded from its own ranking")
    order = gallery.order(query, exclude)
    return 1 + [gallery.ids[i] for i in order].index(key)


def isr(queries, target_ids, gallery):
    """Fraction of queries whose Rank-1 match carries the designated target identity."""
    if len(queries) == 0:
        raise ValueError("isr needs at least one probe")
    if len(queries) != len(target_ids):
        raise ValueError("one target identity per probe required")
    known = set(gallery.identities)
    hits = 0
    for q, t in zip(queries, target_ids):
        if t not in known:
            raise ValueError(f"target identity {t!r} missing from gallery")
        hits += gallery.top1(q)[1] == t
    return hits / len(queries)


def rank1_accuracy(queries, identities, gallery):
    if len(queries) == 0:
        raise ValueError("rank-1 accuracy needs at least one probe")
    if len(queries) != len(identities):
        raise ValueError("one identity per probe required")
    return sum(gallery.top1(q)[1] == y for q, y in zip(queries, identities)) / len(queries)


def rebinarize_protocol(probes):
    """Hard re-binarise every probe (sequences or arrays)."""
    out = []
    for p in probes:
        if isinstance(p, SilhouetteSequence):
            out.append(p.with_frames(hard_binarize(p.frames)))
        else:
            out.append(hard_binarize(p))
    return out


# quality ---------------------------------------------------------------------------

def _check_pair(x, y):
    x = x.frames if isinstance(x, SilhouetteSequence) else np.asarray(x, dtype=np.float64)
    y = y.frames if isinstance(y, SilhouetteSequence) else np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    return x, y


def psnr(x, y, cap=PSNR_CAP):
    """Mean per-frame PSNR (dB) for dynamic range 1, capped at ``cap``."""
    x, y = _check_pair(x, y)
    vals = []
    for a, b in zip(x, y):
        mse = float(np.mean((a - b) ** 2))
        vals.append(cap if mse < 1e-10 else min(cap, 10.0 * math.log10(1.0 / mse)))
    return float(np.mean(vals))


def _gauss_operator(n, size=11, sigma=1.5):
    r = size // 2
    i = np.arange(n)
    d = i[:, None] - i[None, :]
    K = np.exp(-(d**2) / (2.0 * sigma**2))
    K[np.abs(d) > r] = 0.0
    return K


def ssim(x, y, size=11, sigma=1.5):
    """Mean per-frame SSIM; the Gaussian window is clipped at borders and
    its weights renormalised."""
    x, y = _check_pair(x, y)
    H, W = x.shape[1:]
    Kh, Kw = _gauss_operator(H, size, sigma), _gauss_operator(W, size, sigma)
    norm = Kh @ np.ones((H, W)) @ Kw.T

    def blur(a):
        return Kh @ a @ Kw.T / norm

    vals = []
    for a, b in zip(x, y):
        mu_a, mu_b = blur(a), blur(b)
        var_a = blur(a * a) - mu_a * mu_a
        var_b = blur(b * b) - mu_b * mu_b
        cov = blur(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


# utility ---------------------------------------------------------------------------

def tilt_score(x, guard=1e-6):
    """Mass-weighted mean over frames of (upper-half centroid column minus
    lower-half centroid column), in pixels."""
    arr = x.frames if isinstance(x, SilhouetteSequence) else np.asarray(x, dtype=np.float64)
    L, H, W = arr.shape
    cols = np.arange(W) + 0.5
    half = H // 2
    num = den = 0.0
    for f in arr:
        up, lo = f[:half], f[half:]
        mu, ml = up.sum(), lo.sum()
        cu = (up.sum(axis=0) @ cols) / (mu + guard)
        cl = (lo.sum(axis=0) @ cols) / (ml + guard)
        m = f.sum()
        num += m * (cu - cl)
        den += m
    return num / (den + guard)


def predict_tilt(x):
    # ties (no measurable lean) go to label 0
    return 1 if tilt_score(x) > TILT_TIE else 0


def utility_accuracy(sequences):
    if len(sequences) == 0:
        raise ValueError("utility accuracy needs at least one sequence")
    hits = 0
    for s in sequences:
        if getattr(s, "tilt_label", None) is None:
            raise ValueError("sequence without a tilt label")
        hits += predict_tilt(s) == s.tilt_label
    return hits / len(sequences)


# reports ---------------------------------------------------------------------------

@dataclass
class ProbeRecord:
    probe: str
    source_identity: str
    target_identity: str | None
    top1_before: str
    top1_after: str
    target_rank_before: int | None = None
    target_rank_after: int | None = None
    source_rank_after: int | None = None


@dataclass
class RankShiftReport:
    target_rank_source_mean: float
    target_rank_source_median: float
    target_rank_protected_mean: float
    target_rank_protected_median: float
    source_rank_protected_mean: float
    source_rank_protected_median: float


@dataclass
class PrivacyReport:
    isr: float | None
    rank1_before: float
    rank1_after: float
    records: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    rank_shift: RankShiftReport | None = None


def rank_shift(source_q, protected_q, source_ids, target_ids, gallery):
    """Target/source sequence ranks before and after protection.

    The gallery must contain every source and target sequence. A source probe
    is never ranked against its own entry.
    """
    t_src = [rank_of(q, t, gallery, exclude=(s,)) for q, s, t in zip(source_q, source_ids, target_ids)]
    t_pro = [rank_of(q, t, gallery) for q, t in zip(protected_q, target_ids)]
    s_pro = [rank_of(q, s, gallery) for q, s in zip(protected_q, source_ids)]
    report = RankShiftReport(
        float(np.mean(t_src)), float(median(t_src)),
        float(np.mean(t_pro)), float(median(t_pro)),
        float(np.mean(s_pro)), float(median(s_pro)),
    )
    return report, t_src, t_pro, s_pro


def privacy_report(sources, protected, gallery, embedder, targets=None, rebinarize=False, flags=None, probe_ids=None):
    """Compare source probes with their protected versions.

    ``sources`` and ``protected`` are aligned lists of sequences carrying
    identities; ``targets`` (optional) is an aligned list of target
    sequences or target identity strings. ISR needs target identities.
    """
    if len(sources) != len(protected):
        raise ValueError("sources and protected probes must align")
    if len(sources) == 0:
        raise ValueError("no probes")
    probes = rebinarize_protocol(protected) if rebinarize else list(protected)
    q_src = [embedder.embed(s) for s in sources]
    q_pro = [embedder.embed(p) for p in probes]
    src_ids = [s.identity for s in sources]
    tar_ids = None
    if targets is not None:
        tar_ids = [t if isinstance(t, str) or t is None else t.identity for t in targets]
    report = PrivacyReport(
        isr(q_pro, tar_ids, gallery) if tar_ids is not None else None,
        rank1_accuracy(q_src, src_ids, gallery),
        rank1_accuracy(q_pro, src_ids, gallery),
        flags={"rebinarize": bool(rebinarize), "embedder_seed": getattr(embedder, "seed", None), **(flags or {})},
    )
    for i, (s, qs, qp) in enumerate(zip(sources, q_src, q_pro)):
        report.records.append(ProbeRecord(
            probe_ids[i] if probe_ids is not None else f"probe{i:03d}",
            s.identity,
            tar_ids[i] if tar_ids is not None else None,
            gallery.top1(qs)[1],
            gallery.top1(qp)[1],
        ))
    return report


def write_report(path, privacy, quality=None, utility=None):
    doc = {
        "protocol": privacy.flags,
        "isr": privacy.isr,
        "rank1_before": privacy.rank1_before,
        "rank1_after": privacy.rank1_after,
        "rank_shift": asdict(privacy.rank_shift) if privacy.rank_shift else None,
        "quality": quality or {},
        "utility": utility or {},
        "per_probe": [asdict(r) for r in privacy.records],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def export_embeddings(path, ids, identities, embeddings):
    """CSV rows: id, identity, e_0..e_{m-1}."""
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "identity"] + [f"e{j}" for j in range(E.shape[1])])
        for k, y, e in zip(ids, identities, E):
            w.writerow([k, y] + [repr(float(v)) for v in e])
