"""Protocol runner: corpus -> (source, target) pairs -> protection -> reports.

Shared by the acceptance tests, the CLI and the benchmark script.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from statistics import median

import numpy as np

from . import evaluation as ev
from .baseline_pgd import PgdConfig, pgd_protect
from .objective import LossWeights
from .protector import ProtectionConfig, Protector
from .silhouette import make_corpus

METHODS = ("full", "vae-only", "obf-only", "pgd")


@dataclass(frozen=True)
class Pair:
    source_id: str
    target_id: str
    source: object
    target: object


def _identity_of(corpus, sid):
    return corpus.sequences[sid].identity


def select_pairs(corpus, ensemble, policy="nearest", source_condition="nm-05", target_condition="nm-06"):
    """One pair per source identity.

    ``nearest``: the target is the other identity whose gallery sequences are
    most similar to the source under the surrogate ensemble (no access to the
    evaluation embedder). ``fixed``: the first two identities are designated
    targets and every other identity is paired with them alternately.
    """
    idents = sorted(corpus.identities)
    gal = corpus.ids("gallery")
    gal_emb = [np.array([g.embed(corpus.sequences[s]) for s in gal]) for g in ensemble]
    gal_ident = np.array([_identity_of(corpus, s) for s in gal])
    pairs = []
    if policy == "fixed":
        if len(idents) < 3:
            raise ValueError("fixed-target policy needs at least three identities")
        sources = idents[2:]
    elif policy == "nearest":
        sources = idents
    else:
        raise ValueError(f"unknown pairing policy {policy!r}")
    for i, src in enumerate(sources):
        sid = f"{src}_{source_condition}"
        if sid not in corpus.sequences:
            raise KeyError(f"corpus has no sequence {sid}")
        if policy == "fixed":
            tgt = idents[i % 2]
        else:
            x = corpus.sequences[sid]
            score = np.zeros(len(idents))
            for g, E in zip(ensemble, gal_emb):
                sims = E @ g.embed(x)
                score += [sims[gal_ident == k].mean() if k != src else -np.inf for k in idents]
            tgt = idents[int(np.argmax(score))]
        tid = f"{tgt}_{target_condition}"
        pairs.append(Pair(sid, tid, corpus.sequences[sid], corpus.sequences[tid]))
    return pairs


def suite_pairs(ensemble, corpus_seeds=(0, 1, 2), policy="nearest", **corpus_kw):
    """Pairs from several seeded corpora; returns [(corpus, [Pair])]."""
    out = []
    for seed in corpus_seeds:
        corpus = make_corpus(seed=seed, **corpus_kw)
        out.append((corpus, select_pairs(corpus, ensemble, policy)))
    return out


def method_config(method, base=None):
    base = base or ProtectionConfig()
    if method == "full":
        return replace(base, pipeline="full")
    if method == "vae-only":
        return replace(base, pipeline="vae-only")
    if method == "obf-only":
        with warnings.catch_warnings():
            # lambda_imp = 0 is the point of this ablation
            warnings.simplefilter("ignore")
            weights = LossWeights(0.0, base.weights.lambda_obf)
        return replace(base, pipeline="full", weights=weights)
    raise ValueError(f"no latent-optimisation config for method {method!r}")


def run_method(method, pairs, models, ensemble, protection=None, pgd=None, jobs=1):
    """Protect every pair; results come back in pair order."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r} (choose from {METHODS})")
    if method == "pgd":
        cfg = pgd or PgdConfig(weights=(protection or ProtectionConfig()).weights)

        def job(p):
            return pgd_protect(p.source, p.target, cfg, ensemble)
    else:
        protector = Protector(models, method_config(method, protection))

        def job(p):
            r = protector.protect(p.source, p.target, ensemble, keep_latents=False)
            r.method = method
            return r

    if jobs <= 1:
        return [job(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(job, pairs))


@dataclass
class SuiteOutcome:
    report: ev.PrivacyReport
    report_rebin: ev.PrivacyReport
    psnr: float
    ssim: float
    utility_source: float
    utility_protected: float


def evaluate_suite(groups, results, evaluator):
    """``groups``: [(corpus, [Pair])]; ``results``: matching nested lists.

    Each corpus has its own gallery (its gallery split); the per-corpus
    reports are pooled probe-wise.
    """
    sources, protected, targets, probe_ids = [], [], [], []
    q = {"plain": [], "rebin": []}
    t_src, t_pro, s_pro = [], [], []
    pooled = {"plain": [0, 0, 0], "rebin": [0, 0, 0]}
    n = 0
    for (corpus, pairs), res in zip(groups, results):
        gal_seqs = {k: corpus.sequences[k] for k in corpus.ids("gallery")}
        gallery = ev.Gallery.build(gal_seqs, evaluator)
        srcs = [p.source for p in pairs]
        pros = [r.x_pro for r in res]
        tars = [p.target for p in pairs]
        for key, rebin in (("plain", False), ("rebin", True)):
            rep = ev.privacy_report(srcs, pros, gallery, evaluator, tars, rebinarize=rebin,
                                    probe_ids=[p.source_id for p in pairs])
            k = len(pairs)
            pooled[key][0] += rep.isr * k
            pooled[key][1] += rep.rank1_before * k
            pooled[key][2] += rep.rank1_after * k
            q[key].extend(rep.records)
        # sequence-level ranks: gallery plus every source/target sequence
        extra_ids = [p.source_id for p in pairs] + [p.target_id for p in pairs]
        extra_seq = [corpus.sequences[i] for i in extra_ids]
        big = gallery.extended(extra_ids, [s.identity for s in extra_seq], [evaluator.embed(s) for s in extra_seq])
        rs, a, b, c = ev.rank_shift(
            [evaluator.embed(s) for s in srcs], [evaluator.embed(x) for x in pros],
            [p.source_id for p in pairs], [p.target_id for p in pairs], big,
        )
        for rec, ra, rb, rc in zip(q["plain"][-len(pairs):], a, b, c):
            rec.target_rank_before, rec.target_rank_after, rec.source_rank_after = ra, rb, rc
        t_src += a
        t_pro += b
        s_pro += c
        sources += srcs
        protected += pros
        targets += tars
        probe_ids += [p.source_id for p in pairs]
        n += len(pairs)
    reports = {}
    for key in ("plain", "rebin"):
        isr_v, r1b, r1a = (v / n for v in pooled[key])
        reports[key] = ev.PrivacyReport(
            isr_v, r1b, r1a, q[key], {"rebinarize": key == "rebin", "embedder_seed": evaluator.seed}
        )
    reports["plain"].rank_shift = ev.RankShiftReport(
        float(np.mean(t_src)), float(median(t_src)),
        float(np.mean(t_pro)), float(median(t_pro)),
        float(np.mean(s_pro)), float(median(s_pro)),
    )
    return SuiteOutcome(
        reports["plain"],
        reports["rebin"],
        float(np.mean([ev.psnr(s, p) for s, p in zip(sources, protected)])),
        float(np.mean([ev.ssim(s, p) for s, p in zip(sources, protected)])),
        ev.utility_accuracy(sources),
        ev.utility_accuracy(protected),
    )


def run_suite(method, models, ensemble, evaluator, corpus_seeds=(0, 1, 2), policy="nearest",
              protection=None, pgd=None, jobs=1):
    groups = suite_pairs(ensemble, corpus_seeds, policy)
    results = [run_method(method, pairs, models, ensemble, protection, pgd, jobs) for _, pairs in groups]
    return evaluate_suite(groups, results, evaluator), groups, results
