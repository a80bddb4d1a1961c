import math

import numpy as np
import pytest

from gaitdeid import diffcore as dc
from gaitdeid import models as m
from gaitdeid.silhouette import WalkerIdentity, make_corpus, synth_walker
from helpers import central_diff, rel_err

# captured at the first verified build (see test_predictor_golden_norm)
PREDICTOR_NORM_T3 = 3.2867266282164618


def _python_splitmix(seed, n):
    # straight transcription of the reference generator with Python ints
    out, state = [], seed
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & m._MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m._MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m._MASK
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_matches_integer_reference():
    for seed in (0, 1, 2**63 + 5):
        assert [int(v) for v in m.splitmix64(seed, 6)] == _python_splitmix(seed, 6)


def test_splitmix_known_value():
    # first output for seed 0, widely published for SplitMix64
    assert int(m.splitmix64(0, 1)[0]) == 0xE220A8397B1DCDAF


def test_splitmix_uniform_range():
    u = m.splitmix_uniform(7, (1000,), 0.25)
    assert u.min() >= -0.25 and u.max() <= 0.25
    assert abs(u.mean()) < 0.02


# autoencoder --------------------------------------------------------------------------

def test_q_orthogonal(models):
    Q = models.autoencoder.Q
    assert np.abs(Q.T @ Q - np.eye(Q.shape[0])).max() < 1e-10


def test_block_orthogonal_is_local():
    Q = m.block_orthogonal(3, (2, 4, 4), (2, 2, 2))
    idx = np.arange(32).reshape(2, 4, 4)
    cell = set(idx[:, :2, :2].ravel())
    col = Q[:, idx[0, 0, 0]]
    assert set(np.flatnonzero(col)) <= cell
    assert np.abs(Q @ Q.T - np.eye(32)).max() < 1e-12


def test_block_orthogonal_uneven_edges():
    Q = m.block_orthogonal(3, (3, 5, 5), (2, 2, 2))
    assert np.abs(Q.T @ Q - np.eye(75)).max() < 1e-12


def test_non_orthogonal_rejected():
    with pytest.raises(ValueError, match="orthogonal"):
        m.AutoencoderPair((1, 2, 2), Q=np.ones((4, 4)))


def test_identity_q_half_gives_zero():
    ae = m.AutoencoderPair((2, 3, 3), Q=np.eye(18))
    np.testing.assert_array_equal(ae.encode(np.full((2, 3, 3), 0.5)), np.zeros(18))


def test_all_ones_encodes_to_clamp_logit(models):
    ae = models.autoencoder
    z = ae.encode(np.ones(ae.shape))
    expected = ae.Q @ np.full(ae.dim, math.log(0.99 / 0.01))
    np.testing.assert_allclose(z, expected, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(z))


def test_zero_latent_decodes_to_half(models):
    x = models.autoencoder.decode(np.zeros(models.autoencoder.dim))
    np.testing.assert_array_equal(x.data, np.full(models.autoencoder.shape, 0.5))


def test_roundtrip_on_walker(models, walker_seq):
    ae = models.autoencoder
    x = np.clip(walker_seq.frames, 0.01, 0.99)
    back = ae.decode(ae.encode(x)).data
    assert np.abs(back - x).max() < 1e-6


def test_roundtrip_dense_q_walker(walker_seq):
    ae = m.AutoencoderPair((8, 16, 16), seed=5, block=(8, 16, 16))
    x = np.clip(walker_seq.frames, 0.01, 0.99)
    assert np.abs(ae.decode(ae.encode(x)).data - x).max() < 1e-6


def test_encode_shape_mismatch(models):
    with pytest.raises(ValueError, match="shape"):
        models.autoencoder.encode(np.zeros((4, 16, 16)))
    with pytest.raises(ValueError, match="length"):
        models.autoencoder.decode(np.zeros(5))


def test_decode_gradient_fd():
    ae = m.AutoencoderPair((2, 4, 4), seed=9)
    z = np.linspace(-1.5, 1.5, ae.dim)
    with dc.Tape() as tape:
        t = dc.Tensor(z, requires_grad=True)
        root = dc.mean(ae.decode(t))
    g = tape.backward(root)[t]
    f = lambda v: float(np.mean(ae.decode(v).data))  # noqa: E731
    for i in range(0, ae.dim, 3):
        assert rel_err(g[i], central_diff(f, z, i)) < 1e-5


def test_autoencoder_file_roundtrip(tmp_path):
    ae = m.AutoencoderPair((2, 4, 4), seed=4)
    ae.save(tmp_path / "ae.gpmw")
    back = m.AutoencoderPair.load(tmp_path / "ae.gpmw")
    np.testing.assert_array_equal(back.Q, ae.Q)
    assert back.shape == ae.shape and back.clamp_margin == ae.clamp_margin


# weight container ---------------------------------------------------------------------

def test_weight_file_layout(tmp_path):
    path = tmp_path / "w.gpmw"
    m.write_weights(path, 77, [np.arange(6.0).reshape(2, 3), np.array([1.5])])
    raw = path.read_bytes()
    assert raw[:4] == b"GPMW"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:16], "little") == 77
    assert int.from_bytes(raw[16:20], "little") == 2
    assert len(raw) == 20 + 2 * 8 + 7 * 8
    seed, mats = m.read_weights(path)
    assert seed == 77
    np.testing.assert_array_equal(mats[0], np.arange(6.0).reshape(2, 3))


def test_weight_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError, match="magic"):
        m.read_weights(p)
    m.write_weights(p, 1, [np.ones((1, 1))])
    p.write_bytes(p.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing"):
        m.read_weights(p)


# noise predictor ----------------------------------------------------------------------

def test_null_predictor_is_zero(rng):
    p = m.NoisePredictor(16, 20, mode="null")
    np.testing.assert_array_equal(p.predict(rng.normal(size=16), 5), np.zeros(16))
    np.testing.assert_array_equal(p(dc.Tensor(rng.normal(size=16)), 5).data, np.zeros(16))


def test_predictor_repeatable(models, rng):
    z = rng.normal(size=models.autoencoder.dim)
    a = models.predictor.predict(z, 3)
    b = models.predictor.predict(z, 3)
    assert a.tobytes() == b.tobytes()


def test_predictor_golden_norm(models):
    z = m.splitmix_uniform(99, (models.autoencoder.dim,), 1.0)
    z /= np.linalg.norm(z)
    assert float(np.linalg.norm(models.predictor.predict(z, 3))) == pytest.approx(PREDICTOR_NORM_T3, rel=1e-12)


def test_predictor_tensor_matches_array(rng):
    p = m.NoisePredictor(6, 4, hidden=5, seed=3)
    z = rng.normal(size=6)
    np.testing.assert_allclose(p(dc.Tensor(z), 2).data, p.predict(z, 2), rtol=0, atol=1e-15)


def test_predictor_step_range():
    p = m.NoisePredictor(4, 3, hidden=2)
    with pytest.raises(ValueError):
        p.predict(np.zeros(4), 4)
    with pytest.raises(ValueError):
        p.predict(np.zeros(4), -1)


def test_predictor_weights_frozen(models):
    with pytest.raises(ValueError):
        models.predictor.W1[0, 0] = 1.0


def test_predictor_file_roundtrip(tmp_path, rng):
    p = m.NoisePredictor(6, 4, hidden=5, seed=3)
    p.save(tmp_path / "p.gpmw")
    q1 = m.NoisePredictor.load(tmp_path / "p.gpmw")
    q2 = m.NoisePredictor.load(tmp_path / "p.gpmw")
    z = rng.normal(size=6)
    assert q1.predict(z, 1).tobytes() == p.predict(z, 1).tobytes() == q2.predict(z, 1).tobytes()


def test_predictor_one_hot_fold():
    p = m.NoisePredictor(3, 2, hidden=4, seed=8)
    z = np.array([0.2, -0.1, 0.4])
    onehot = np.eye(3)[1]
    direct = p.W2 @ np.tanh(p.W1 @ np.concatenate([z, onehot]) + p.b1) + p.b2
    np.testing.assert_allclose(p.predict(z, 1), direct, rtol=0, atol=1e-15)


# embedders ----------------------------------------------------------------------------

def test_embedding_unit_norm(models, corpus):
    for sid in corpus.ids()[:12]:
        e = models.evaluator.embed(corpus.sequences[sid])
        assert abs(np.linalg.norm(e) - 1.0) < 1e-9


def test_embedders_differ(models):
    a, b = models.surrogates
    assert not np.array_equal(a.W, b.W)
    assert not np.array_equal(a.W, models.evaluator.W)


def test_embedding_of_empty_input_is_finite(models):
    e = models.evaluator.embed(np.zeros((8, 16, 16)))
    assert np.all(np.isfinite(e))


def test_embed_is_translation_sensitive(models, walker_seq):
    shifted = np.roll(walker_seq.frames, 2, axis=2)
    e0 = models.evaluator.embed(walker_seq)
    e1 = models.evaluator.embed(shifted)
    assert np.dot(e0, e1) < 1.0 - 1e-6


def test_embed_gradient_fd(models, walker_seq):
    x = np.clip(walker_seq.frames, 0.2, 0.8)
    u = np.linspace(-1, 1, 32)
    with dc.Tape() as tape:
        t = dc.Tensor(x, requires_grad=True)
        root = dc.dot(models.evaluator(t), dc.Tensor(u))
    g = tape.backward(root)[t]
    f = lambda v: float(models.evaluator.embed(v) @ u)  # noqa: E731
    rs = np.random.default_rng(0)
    for i in rs.choice(x.size, 10, replace=False):
        assert rel_err(g.flat[i], central_diff(f, x, i)) < 1e-5


def test_limb_length_separability(models):
    rs = np.random.default_rng(11)
    wins = 0
    for trial in range(20):
        base = WalkerIdentity.sample(rs)
        short = WalkerIdentity(base.torso_width, base.torso_height, 0.30, base.stride_freq, base.phase, base.tilt)
        long_ = WalkerIdentity(base.torso_width, base.torso_height, 0.45, base.stride_freq, base.phase, base.tilt)
        e = models.evaluator.embed
        a1 = e(synth_walker(short, seed=2 * trial))
        a2 = e(synth_walker(short, seed=2 * trial + 1))
        b1 = e(synth_walker(long_, seed=2 * trial))
        wins += (a1 @ b1) < (a1 @ a2)
    assert wins == 20


def _rank1(embedder, corpus):
    gal = corpus.ids("gallery")
    G = np.array([embedder.embed(corpus.sequences[s]) for s in gal])
    ok = [
        corpus.sequences[gal[int(np.argmax(G @ embedder.embed(corpus.sequences[p])))]].identity
        == corpus.sequences[p].identity
        for p in corpus.ids("probe")
    ]
    return np.mean(ok)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_evaluator_rank1_calibration(models, seed):
    assert _rank1(models.evaluator, make_corpus(10, 6, seed=seed)) >= 0.9


def test_feature_constants_match_calibration():
    center, scale = m.calibrate_feature_scaling()
    np.testing.assert_allclose(m.FEATURE_CENTER, center, rtol=6e-3)
    np.testing.assert_allclose(m.FEATURE_SCALE, scale, rtol=6e-3)


def test_embedder_file_roundtrip(tmp_path, models, walker_seq):
    models.evaluator.save(tmp_path / "e.gpmw")
    a = m.MomentEmbedder.load(tmp_path / "e.gpmw")
    b = m.MomentEmbedder.load(tmp_path / "e.gpmw")
    assert a.embed(walker_seq).tobytes() == b.embed(walker_seq).tobytes() == models.evaluator.embed(walker_seq).tobytes()


def test_model_config_warns_on_shared_seed():
    with pytest.warns(UserWarning, match="white-box"):
        m.ModelConfig(eval_seed=11)


def test_cached_models_shared():
    assert m.cached_models() is m.cached_models(m.ModelConfig())
