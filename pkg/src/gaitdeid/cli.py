"""Command line: ``gaitdeid synth | protect | evaluate``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .baseline_pgd import PgdConfig, pgd_protect
from .diffusion import DiffusionConfig
from .models import ModelConfig, cached_models
from .objective import LossWeights
from .protector import NumericalAbort, ProtectionConfig, Protector
from .silhouette import (
    BinarizationConfig,
    load_sequence,
    load_sequence_dirs,
    make_corpus,
    save_corpus,
    save_sequence,
)
from .suite import METHODS

log = logging.getLogger("gaitdeid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# run configuration -------------------------------------------------------------------

_MODEL_DEFAULTS = ModelConfig()

DEFAULTS = {
    "protection.iterations": 50,
    "protection.lr": 0.1,
    "protection.beta1": 0.9,
    "protection.beta2": 0.999,
    "protection.eps": 1e-8,
    "protection.weight_decay": 0.0,
    "loss.lambda_imp": 1.5,
    "loss.lambda_obf": 0.1,
    "diffusion.T": 20,
    "diffusion.t_init": 3,
    "diffusion.variant": "standard",
    "binarization.tau": 0.1,
    "pgd.iterations": 50,
    "pgd.alpha": 0.25,
    "pgd.momentum": 0.9,
    "pgd.eps_inf": 1.0,
    "models.prior": _MODEL_DEFAULTS.prior,
    "models.hidden": _MODEL_DEFAULTS.hidden,
    "models.embed_dim": _MODEL_DEFAULTS.embed_dim,
    "models.clamp_margin": _MODEL_DEFAULTS.clamp_margin,
    "models.mix_block": list(_MODEL_DEFAULTS.mix_block),
    "models.autoencoder_seed": _MODEL_DEFAULTS.autoencoder_seed,
    "models.predictor_seed": _MODEL_DEFAULTS.predictor_seed,
    "models.surrogate_seeds": list(_MODEL_DEFAULTS.surrogate_seeds),
    "models.eval_seed": _MODEL_DEFAULTS.eval_seed,
    "corpus.ids": 10,
    "corpus.seqs_per_id": 6,
    "corpus.seed": 0,
    "corpus.frames": 8,
    "corpus.height": 16,
    "corpus.width": 16,
    "corpus.min_tilt": None,
    "eval.psnr_cap": ev.PSNR_CAP,
}


def _coerce(key, value):
    default = DEFAULTS[key]
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise UsageError(f"{key}: expected a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise UsageError(f"{key}: expected a string, got {value!r}")
    return value


def load_run_config(path=None, overrides=()):
    """Defaults, then the JSON file (flat dotted keys), then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path}: expected a JSON object of dotted keys")
        for k, v in data.items():
            if k not in DEFAULTS:
                raise UsageError(f"{path}: unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    for item in overrides:
        k, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if k not in DEFAULTS:
            raise UsageError(f"unknown config key {k!r}")
        try:
            v = json.loads(raw)
        except json.JSONDecodeError:
            v = raw
        cfg[k] = _coerce(k, v)
    return cfg


def protection_config(cfg, method):
    try:
        with warnings.catch_warnings():
            if method == "obf-only":
                warnings.simplefilter("ignore")
            weights = LossWeights(0.0 if method == "obf-only" else cfg["loss.lambda_imp"], cfg["loss.lambda_obf"])
        return ProtectionConfig(
            diffusion=DiffusionConfig(cfg["diffusion.T"], cfg["diffusion.t_init"], cfg["diffusion.variant"]),
            iterations=cfg["protection.iterations"],
            lr=cfg["protection.lr"],
            beta1=cfg["protection.beta1"],
            beta2=cfg["protection.beta2"],
            eps=cfg["protection.eps"],
            weight_decay=cfg["protection.weight_decay"],
            weights=weights,
            binarization=BinarizationConfig(cfg["binarization.tau"]),
            pipeline="vae-only" if method == "vae-only" else "full",
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def pgd_config(cfg):
    try:
        return PgdConfig(
            cfg["pgd.iterations"], cfg["pgd.alpha"], cfg["pgd.momentum"], cfg["pgd.eps_inf"],
            LossWeights(cfg["loss.lambda_imp"], cfg["loss.lambda_obf"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def model_config(cfg, shape):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ModelConfig(
            shape=tuple(shape),
            T=cfg["diffusion.T"],
            prior=cfg["models.prior"],
            hidden=cfg["models.hidden"],
            embed_dim=cfg["models.embed_dim"],
            clamp_margin=cfg["models.clamp_margin"],
            autoencoder_seed=cfg["models.autoencoder_seed"],
            predictor_seed=cfg["models.predictor_seed"],
            surrogate_seeds=tuple(cfg["models.surrogate_seeds"]),
            eval_seed=cfg["models.eval_seed"],
            mix_block=tuple(cfg["models.mix_block"]),
        )


def _models(cfg, shape):
    try:
        return cached_models(model_config(cfg, shape))
    except ValueError as exc:
        raise UsageError(f"model config: {exc}") from None


# output staging ------------------------------------------------------------------------

class _Staged:
    """Write into a sibling temp dir, move into place only on success."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self):
        if self.out.exists() and (not self.out.is_dir() or any(self.out.iterdir())):
            raise DataError(f"output path exists and is not empty: {self.out}")
        parent = self.out.parent
        try:
            parent.mkdir(parents=True, exist_ok=True)
            self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=parent))
        except OSError as exc:
            raise DataError(f"cannot write to {parent}: {exc.strerror}") from None
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            self.out.rmdir()
        os.replace(self.tmp, self.out)
        return False


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands -------------------------------------------------------------------------------

def cmd_synth(args):
    cfg = load_run_config(args.config, args.set)
    n_ids = args.ids if args.ids is not None else cfg["corpus.ids"]
    per = args.seqs_per_id if args.seqs_per_id is not None else cfg["corpus.seqs_per_id"]
    seed = args.seed if args.seed is not None else cfg["corpus.seed"]
    if n_ids < 1 or per < 1:
        raise UsageError("--ids and --seqs-per-id must be >= 1")
    corpus = make_corpus(
        n_ids, per, seed,
        frames=args.frames or cfg["corpus.frames"],
        height=args.height or cfg["corpus.height"],
        width=args.width or cfg["corpus.width"],
        min_tilt=args.min_tilt if args.min_tilt is not None else cfg["corpus.min_tilt"],
    )
    with _Staged(args.out) as tmp:
        save_corpus(corpus, tmp)
    log.info("wrote %d sequences to %s", len(corpus.sequences), args.out)
    return EXIT_OK


def _load_seq(path, role):
    try:
        return load_sequence(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{role} {path}: {exc}") from None


def _read_pairs(path):
    pairs = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"pair list {path}: {exc.strerror}") from None
    base = Path(path).parent
    for n, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected 'source<TAB>target'")
        pairs.append(tuple(str(p if os.path.isabs(p) else base / p) for p in (s.strip() for s in parts)))
    if not pairs:
        raise DataError(f"{path}: no pairs")
    return pairs


def _protect_one(src_path, tar_path, method, cfg, out_dir):
    src = _load_seq(src_path, "source")
    tar = _load_seq(tar_path, "target")
    if src.shape != tar.shape:
        raise DataError(f"source {src.shape} and target {tar.shape} shapes differ")
    models = _models(cfg, src.shape)
    ensemble = list(models.surrogates)
    try:
        if method == "pgd":
            result = pgd_protect(src, tar, pgd_config(cfg), ensemble, record_masks=False)
        else:
            result = Protector(models, protection_config(cfg, method)).protect(src, tar, ensemble, keep_latents=False)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    source_id, target_id = Path(src_path).name, Path(tar_path).name
    protected = result.x_pro.with_frames(
        result.x_pro.frames, method=method, source_id=source_id, target_id=target_id,
        target_identity=tar.identity,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_sequence(protected, out_dir / "protected")
    save_sequence(src.with_frames(src.frames, sequence_id=source_id), out_dir / "source")
    save_sequence(tar.with_frames(tar.frames, sequence_id=target_id), out_dir / "target")
    _write_json(out_dir / "loss_trace.json", result.report.to_json())
    meta = result.meta()
    meta.update(
        method=method,
        run_config=cfg,
        source=str(src_path),
        target=str(tar_path),
        source_id=source_id,
        target_id=target_id,
        version=__version__,
    )
    _write_json(out_dir / "result_meta.json", meta)
    return {"source": str(src_path), "target": str(tar_path), "method": method,
            "final_loss": result.report[-1].total, "wall_time_s": result.wall_time}


def cmd_protect(args):
    cfg = load_run_config(args.config, args.set)
    if args.pairs:
        if args.source or args.target:
            raise UsageError("use either --pairs or --source/--target")
        pairs = _read_pairs(args.pairs)
    else:
        if not (args.source and args.target):
            raise UsageError("--source and --target are required without --pairs")
        pairs = [(args.source, args.target)]
    with _Staged(args.out) as tmp:
        if not args.pairs:
            _protect_one(*pairs[0], args.method, cfg, tmp)
        else:
            def job(k):
                s, t = pairs[k]
                entry = _protect_one(s, t, args.method, cfg, tmp / f"pair_{k:03d}")
                return {"dir": f"pair_{k:03d}", **entry}

            if args.jobs > 1:
                with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                    index = list(pool.map(job, range(len(pairs))))
            else:
                index = [job(k) for k in range(len(pairs))]
            _write_json(tmp / "index.json", {"method": args.method, "count": len(index), "pairs": index})
    log.info("protected %d pair(s) into %s", len(pairs), args.out)
    return EXIT_OK


def _pair_dirs(root):
    root = Path(root)
    if (root / "result_meta.json").exists():
        return [root]
    if not root.is_dir():
        raise DataError(f"probe directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if (p / "result_meta.json").exists())
    if not dirs:
        raise DataError(f"{root}: no protected pair directories")
    return dirs


def cmd_evaluate(args):
    cfg = load_run_config(args.config, args.set)
    sources, protected, targets, target_ids, names = [], [], [], [], []
    for d in _pair_dirs(args.probes):
        src = _load_seq(d / "source", "source")
        pro = _load_seq(d / "protected", "protected probe")
        if pro.identity is None or src.identity is None:
            raise DataError(f"probe {d.name}: missing source identity tag")
        if pro.extra.get("target_identity") is None:
            raise DataError(f"probe {d.name}: missing target identity tag")
        sources.append(src)
        protected.append(pro)
        targets.append(pro.extra["target_identity"])
        target_ids.append(pro.extra.get("target_id"))
        names.append(pro.extra.get("source_id", d.name))
    try:
        gal_seqs = load_sequence_dirs(args.gallery, split="gallery")
    except (OSError, ValueError) as exc:
        raise DataError(f"gallery {args.gallery}: {exc}") from None
    own = set(names)
    gal_seqs = {k: v for k, v in gal_seqs.items() if k not in own}
    if not gal_seqs:
        raise DataError(f"{args.gallery}: empty gallery")
    if any(s.identity is None for s in gal_seqs.values()):
        raise DataError(f"{args.gallery}: gallery sequence without identity tag")
    models = _models(cfg, sources[0].shape)
    embedder = models.surrogates[0] if args.whitebox else models.evaluator
    gallery = ev.Gallery.build(gal_seqs, embedder)
    missing = [n for n, t in zip(names, targets) if t not in set(gallery.identities)]
    if missing:
        raise DataError(f"probe {missing[0]}: target identity not in gallery")
    flags = {"whitebox": bool(args.whitebox), "surrogate_seeds": cfg["models.surrogate_seeds"]}
    try:
        report = ev.privacy_report(sources, protected, gallery, embedder, targets,
                                   rebinarize=args.rebinarize, flags=flags, probe_ids=names)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    probes = ev.rebinarize_protocol(protected) if args.rebinarize else protected
    if all(t is not None for t in target_ids):
        tar_seqs = [_load_seq(d / "target", "target") for d in _pair_dirs(args.probes)]
        ext_ids = names + target_ids
        ext = sources + tar_seqs
        big = gallery.extended(ext_ids, [s.identity for s in ext], [embedder.embed(s) for s in ext])
        rs, a, b, c = ev.rank_shift([embedder.embed(s) for s in sources], [embedder.embed(p) for p in probes],
                                    names, target_ids, big)
        report.rank_shift = rs
        for rec, ra, rb, rc in zip(report.records, a, b, c):
            rec.target_rank_before, rec.target_rank_after, rec.source_rank_after = ra, rb, rc
    quality = {
        "psnr": float(np.mean([ev.psnr(s, p, cfg["eval.psnr_cap"]) for s, p in zip(sources, probes)])),
        "ssim": float(np.mean([ev.ssim(s, p) for s, p in zip(sources, probes)])),
    }
    utility = {}
    if all(s.tilt_label is not None for s in sources):
        utility = {"acc_source": ev.utility_accuracy(sources), "acc_protected": ev.utility_accuracy(probes)}
    try:
        ev.write_report(args.out, report, quality, utility)
        if args.embeddings:
            E = np.vstack([gallery.embeddings] + [embedder.embed(p)[None] for p in probes])
            ids = gallery.ids + [f"protected:{n}" for n in names]
            ev.export_embeddings(args.embeddings, ids, gallery.identities + [p.identity for p in probes], E)
    except OSError as exc:
        raise DataError(f"cannot write report: {exc.strerror}") from None
    log.info("ISR %.3f, rank-1 %.3f -> %.3f", report.isr, report.rank1_before, report.rank1_after)
    return EXIT_OK


# parser -------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="gaitdeid", description="Silhouette gait de-identification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with flat dotted keys")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    s = sub.add_parser("synth", help="write a synthetic walker corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--ids", type=int)
    s.add_argument("--seqs-per-id", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--min-tilt", type=float)
    common(s)
    s.set_defaults(func=cmd_synth)

    pr = sub.add_parser("protect", help="protect one pair or a pair list")
    pr.add_argument("--source")
    pr.add_argument("--target")
    pr.add_argument("--pairs", help="text file of 'source<TAB>target' lines")
    pr.add_argument("--out", required=True)
    pr.add_argument("--method", choices=METHODS, default="full")
    pr.add_argument("--jobs", type=int, default=1)
    common(pr)
    pr.set_defaults(func=cmd_protect)

    e = sub.add_parser("evaluate", help="privacy, quality and utility report")
    e.add_argument("--probes", required=True, help="protect output (one pair dir or a batch dir)")
    e.add_argument("--gallery", required=True, help="corpus directory")
    e.add_argument("--out", required=True, help="report.json path")
    e.add_argument("--rebinarize", action="store_true")
    e.add_argument("--whitebox", action="store_true", help="evaluate with the first surrogate embedder")
    e.add_argument("--embeddings", help="also write embeddings.csv here")
    common(e)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gaitdeid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"gaitdeid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"gaitdeid: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
