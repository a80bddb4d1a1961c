import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from gaitdeid import cli
from gaitdeid.silhouette import load_sequence

REPORT_KEYS = {"protocol", "isr", "rank1_before", "rank1_after", "rank_shift", "quality", "utility", "per_probe"}
RANK_SHIFT_KEYS = {
    "target_rank_source_mean", "target_rank_source_median",
    "target_rank_protected_mean", "target_rank_protected_median",
    "source_rank_protected_mean", "source_rank_protected_median",
}
RECORD_KEYS = {
    "probe", "source_identity", "target_identity", "top1_before", "top1_after",
    "target_rank_before", "target_rank_after", "source_rank_after",
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("c") / "corpus"
    assert run("synth", "--out", out, "--ids", 10, "--seqs-per-id", 6, "--seed", 0) == 0
    return out


def _pair_file(corpus_dir, path, n):
    lines = [f"{corpus_dir}/id{i % 10:03d}_nm-05\t{corpus_dir}/id{(i + 1) % 10:03d}_nm-06" for i in range(n)]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def batch_dir(tmp_path_factory, corpus_dir):
    base = tmp_path_factory.mktemp("b")
    pairs = _pair_file(corpus_dir, base / "pairs.tsv", 20)
    out = base / "out"
    assert run("protect", "--pairs", pairs, "--out", out, "--set", "protection.iterations=3", "--jobs", 2) == 0
    return out


# synth ---------------------------------------------------------------------------


def test_synth_single(tmp_path):
    assert run("synth", "--out", tmp_path / "one", "--ids", 1, "--seqs-per-id", 1) == 0
    dirs = [p for p in (tmp_path / "one").iterdir() if p.is_dir()]
    assert len(dirs) == 1


def test_synth_counts_match_manifest(corpus_dir):
    meta = json.loads((corpus_dir / "corpus.json").read_text())
    dirs = [p for p in corpus_dir.iterdir() if p.is_dir()]
    assert meta["count"] == len(dirs) == 60


def test_synth_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--ids", 2, "--seqs-per-id", 2, "--seed", 9) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.common_dirs:
        inner = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, inner.common_files, shallow=False)
        assert not mismatch and not errors


def test_synth_refuses_nonempty_output(corpus_dir, capsys):
    assert run("synth", "--out", corpus_dir, "--ids", 1, "--seqs-per-id", 1) == 2
    assert "not empty" in capsys.readouterr().err


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--out", blocker / "sub", "--ids", 1, "--seqs-per-id", 1) == 2


# protect -------------------------------------------------------------------------


def test_protect_zero_iterations_is_reconstruction(tmp_path, corpus_dir, models):
    out = tmp_path / "p"
    code = run("protect", "--source", corpus_dir / "id000_nm-05", "--target", corpus_dir / "id001_nm-06",
               "--out", out, "--set", "protection.iterations=0")
    assert code == 0
    trace = json.loads((out / "loss_trace.json").read_text())
    assert len(trace) == 1
    from gaitdeid.protector import Protector

    src = load_sequence(corpus_dir / "id000_nm-05")
    p = Protector(models)
    expect = np.array(p.phi(p.initial_latent(src)).data)
    # the disk format stores 8-bit levels
    assert np.abs(load_sequence(out / "protected").frames - expect).max() <= 0.5 / 255 + 1e-12
    meta = json.loads((out / "result_meta.json").read_text())
    assert meta["run_config"]["protection.iterations"] == 0
    assert meta["method"] == "full"
    assert set(meta["run_config"]) == set(cli.DEFAULTS)


def test_protect_obf_only_zero_weight(tmp_path, corpus_dir):
    out = tmp_path / "o"
    code = run("protect", "--source", corpus_dir / "id000_nm-05", "--target", corpus_dir / "id001_nm-06",
               "--out", out, "--method", "obf-only", "--set", "protection.iterations=2")
    assert code == 0
    for e in json.loads((out / "loss_trace.json").read_text()):
        assert e["loss_imp"] > 0
        assert e["total"] == pytest.approx(0.1 * e["loss_obf"], abs=1e-15)


def test_protect_pgd_tag(tmp_path, corpus_dir):
    out = tmp_path / "g"
    code = run("protect", "--source", corpus_dir / "id000_nm-05", "--target", corpus_dir / "id001_nm-06",
               "--out", out, "--method", "pgd", "--set", "pgd.iterations=2")
    assert code == 0
    assert json.loads((out / "result_meta.json").read_text())["method"] == "pgd"
    assert set(np.unique(load_sequence(out / "protected").frames)) <= {0.0, 1.0}


def test_protect_batch(batch_dir):
    dirs = sorted(p.name for p in batch_dir.iterdir() if p.is_dir())
    assert dirs == [f"pair_{k:03d}" for k in range(20)]
    index = json.loads((batch_dir / "index.json").read_text())
    assert index["count"] == 20 and [e["dir"] for e in index["pairs"]] == dirs
    for d in dirs:
        for name in ("protected", "source", "target", "loss_trace.json", "result_meta.json"):
            assert (batch_dir / d / name).exists()


def test_protect_jobs_deterministic(tmp_path, corpus_dir, batch_dir):
    pairs = _pair_file(corpus_dir, tmp_path / "p.tsv", 3)
    assert run("protect", "--pairs", pairs, "--out", tmp_path / "serial", "--set", "protection.iterations=3") == 0
    for k in range(3):
        a = load_sequence(tmp_path / "serial" / f"pair_{k:03d}" / "protected").frames
        b = load_sequence(batch_dir / f"pair_{k:03d}" / "protected").frames
        np.testing.assert_array_equal(a, b)


def test_protect_shape_mismatch_leaves_nothing(tmp_path, corpus_dir):
    small = tmp_path / "small"
    assert run("synth", "--out", small, "--ids", 1, "--seqs-per-id", 1, "--height", 8, "--width", 8) == 0
    out = tmp_path / "bad"
    code = run("protect", "--source", corpus_dir / "id000_nm-05", "--target", small / "id000_nm-01", "--out", out)
    assert code == 2
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".bad")]


def test_protect_usage_errors(tmp_path, corpus_dir, capsys):
    assert run("protect", "--out", tmp_path / "x") == 1
    assert run("protect", "--source", corpus_dir / "id000_nm-05", "--target", corpus_dir / "id001_nm-06",
               "--out", tmp_path / "y", "--set", "protection.nope=1") == 1
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("protect", "--out", tmp_path / "z", "--method", "magic")
    assert exc.value.code == 1


def test_config_file(tmp_path):
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"protection.iterations": 7, "loss.lambda_obf": 0}))
    cfg = cli.load_run_config(f, ["diffusion.t_init=2"])
    assert cfg["protection.iterations"] == 7 and cfg["loss.lambda_obf"] == 0.0 and cfg["diffusion.t_init"] == 2
    f.write_text(json.dumps({"protection.iterations": "seven"}))
    with pytest.raises(cli.UsageError):
        cli.load_run_config(f)
    f.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(cli.UsageError, match="bogus"):
        cli.load_run_config(f)


def test_numerical_abort_exit_code(tmp_path, corpus_dir, monkeypatch):
    from gaitdeid.protector import NumericalAbort, Protector

    def boom(self, *a, **k):
        raise NumericalAbort(4, "loss")

    monkeypatch.setattr(Protector, "protect", boom)
    code = run("protect", "--source", corpus_dir / "id000_nm-05", "--target", corpus_dir / "id001_nm-06",
               "--out", tmp_path / "n")
    assert code == 3
    assert not (tmp_path / "n").exists()


# evaluate -------------------------------------------------------------------------


def test_evaluate_schema(tmp_path, corpus_dir, batch_dir):
    out = tmp_path / "report.json"
    assert run("evaluate", "--probes", batch_dir, "--gallery", corpus_dir, "--out", out,
               "--embeddings", tmp_path / "emb.csv") == 0
    doc = json.loads(out.read_text())
    assert set(doc) == REPORT_KEYS
    assert set(doc["rank_shift"]) == RANK_SHIFT_KEYS
    assert set(doc["quality"]) == {"psnr", "ssim"}
    assert set(doc["utility"]) == {"acc_source", "acc_protected"}
    assert len(doc["per_probe"]) == 20
    assert all(set(r) == RECORD_KEYS for r in doc["per_probe"])
    for key in ("isr", "rank1_before", "rank1_after"):
        assert 0 <= doc[key] <= 1
    assert doc["rank1_before"] >= 0.9
    assert doc["protocol"]["whitebox"] is False and doc["protocol"]["embedder_seed"] == 23
    assert (tmp_path / "emb.csv").read_text().startswith("id,identity,e0")


def test_evaluate_whitebox_flag(tmp_path, corpus_dir, batch_dir):
    out = tmp_path / "wb.json"
    assert run("evaluate", "--probes", batch_dir, "--gallery", corpus_dir, "--out", out, "--whitebox") == 0
    doc = json.loads(out.read_text())
    assert doc["protocol"]["whitebox"] is True and doc["protocol"]["embedder_seed"] == 11


def test_evaluate_rebinarize_idempotent_on_binary(tmp_path, corpus_dir):
    out = tmp_path / "pgd"
    pairs = _pair_file(corpus_dir, tmp_path / "p.tsv", 4)
    assert run("protect", "--pairs", pairs, "--out", out, "--method", "pgd", "--set", "pgd.iterations=3") == 0
    assert run("evaluate", "--probes", out, "--gallery", corpus_dir, "--out", tmp_path / "a.json") == 0
    assert run("evaluate", "--probes", out, "--gallery", corpus_dir, "--out", tmp_path / "b.json", "--rebinarize") == 0
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    assert a["protocol"].pop("rebinarize") is False and b["protocol"].pop("rebinarize") is True
    assert a == b


def test_evaluate_missing_tag_names_probe(tmp_path, corpus_dir, batch_dir, capsys):
    import shutil

    probes = tmp_path / "probes"
    shutil.copytree(batch_dir, probes)
    manifest = probes / "pair_004" / "protected" / "manifest.json"
    m = json.loads(manifest.read_text())
    del m["target_identity"]
    manifest.write_text(json.dumps(m))
    assert run("evaluate", "--probes", probes, "--gallery", corpus_dir, "--out", tmp_path / "r.json") == 2
    assert "pair_004" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_evaluate_missing_probe_dir(tmp_path, corpus_dir):
    assert run("evaluate", "--probes", tmp_path / "none", "--gallery", corpus_dir, "--out", tmp_path / "r.json") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gaitdeid", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gaitdeid" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "gaitdeid", "synth"], capture_output=True, text=True)
    assert proc.returncode == 1
