import numpy as np
import pytest

from amil import posedomain as pd
from amil import trainer as tr
from amil.errors import ConfigError, ParseError, ShapeError, TrainingDivergence, VersionError
from amil.losses import AdversarialState

POSE = pd.PoseConfig()


def small_cfg(**kw):
    base = dict(hidden_size=16, batch_size=4, total_iterations=10, seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return pd.stack_samples(pd.generate_dataset(12, 11, POSE), POSE)


def same_state(a, b):
    for x, y in ((a.gen, b.gen), (a.disc, b.disc)):
        assert x.params.keys() == y.params.keys()
        for k in x.params:
            assert np.array_equal(x.params[k], y.params[k])
    for x, y in ((a.gen_opt, b.gen_opt), (a.disc_opt, b.disc_opt)):
        assert x.t == y.t
        for k in x.m:
            assert np.array_equal(x.m[k], y.m[k]) and np.array_equal(x.v[k], y.v[k])
    assert a.adv == b.adv and a.iteration == b.iteration and a.seed == b.seed and a.pose == b.pose


# -- schedule and optimiser --------------------------------------------------------

def test_lr_schedule_examples():
    cfg = tr.TrainConfig()
    assert tr.lr_schedule(0.001, 0, cfg) == 0.001
    assert tr.lr_schedule(0.001, 19, cfg) == 0.001
    assert tr.lr_schedule(0.001, 40, cfg) == pytest.approx(0.00025, abs=1e-18)
    assert tr.DECAY_PRESETS["mpii"] == 0.01


def test_config_validation():
    with pytest.raises(ConfigError):
        tr.TrainConfig(decay_every=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=0)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    mom = tr.AdamMoments({"w": np.array([0.5, 0.5])}, {"w": np.array([0.25, 0.25])}, 3)
    new_p, new_m = tr.adam_update(p, {"w": np.zeros(2)}, mom, 0.0, 0.0)
    assert np.array_equal(new_p["w"], p["w"])
    assert np.allclose(new_m.m["w"], 0.45) and np.allclose(new_m.v["w"], 0.25 * 0.999)


def test_adam_first_step_magnitude():
    p = {"w": np.zeros(4)}
    g = {"w": np.array([3.0, -0.01, 100.0, -7.0])}
    new_p, mom = tr.adam_update(p, g, tr.AdamMoments.zeros_like(p), 0.01)
    assert np.allclose(new_p["w"], -0.01 * np.sign(g["w"]), rtol=1e-5)
    assert mom.t == 1


def test_adam_decoupled_weight_decay_and_shape():
    p = {"w": np.array([2.0])}
    new_p, _ = tr.adam_update(p, {"w": np.zeros(1)}, tr.AdamMoments.zeros_like(p), 0.1, 0.5)
    assert new_p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    with pytest.raises(ShapeError):
        tr.adam_update(p, {"w": np.zeros(2)}, tr.AdamMoments.zeros_like(p), 0.1)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=5)}
    g = {"w": rng.normal(size=5)}
    a = tr.adam_update(p, g, tr.AdamMoments.zeros_like(p), 0.01, 0.01)
    b = tr.adam_update(p, g, tr.AdamMoments.zeros_like(p), 0.01, 0.01)
    assert np.array_equal(a[0]["w"], b[0]["w"]) and np.array_equal(a[1].v["w"], b[1].v["w"])


# -- steps ---------------------------------------------------------------------------

def test_build_models_shapes():
    gen, disc = tr.build_models(POSE, tr.TrainConfig())
    assert gen.input_dim == 66 and gen.out_dim == 448
    assert disc.input_dim == 73 and disc.out_dim == 448


def test_zero_lr_freezes_params_but_moves_k(data):
    cfg = small_cfg(learning_rate=0.0)
    st = tr.TrainState.fresh(POSE, cfg)
    st = tr.replace(st, adv=AdversarialState(k=0.5))
    new, m = tr.train_step(st, data.images[:4], data.heatmaps[:4], cfg)
    for k in st.gen.params:
        assert np.array_equal(new.gen.params[k], st.gen.params[k])
    for k in st.disc.params:
        assert np.array_equal(new.disc.params[k], st.disc.params[k])
    assert new.adv.k != 0.5 and m.k == new.adv.k


def test_equilibrium_all_zero(data):
    cfg = small_cfg()
    st = tr.TrainState.fresh(POSE, cfg)
    for net in (st.gen, st.disc):
        for p in net.params.values():
            p[...] = 0.0
    hm = np.zeros((4, 7, 8, 8))
    new, m = tr.train_step(tr.replace(st, adv=AdversarialState(k=0.3)), data.images[:4], hm, cfg)
    assert (m.l_real, m.l_fake, m.l_D, m.gen_loss) == (0.0, 0.0, 0.0, 0.0)
    assert new.adv.k == 0.3


def test_k_update_uses_batch_normalised_losses(data):
    cfg = small_cfg()
    st = tr.TrainState.fresh(POSE, cfg)
    new, m = tr.train_step(st, data.images[:4], data.heatmaps[:4], cfg)
    drive = 0.5 * m.l_real / 4 - m.l_fake / 4
    assert new.adv.k == pytest.approx(min(1.0, max(0.0, 0.001 * drive)), abs=1e-18)


def test_no_adversarial_keeps_k_zero_and_disc_fixed(data):
    cfg = small_cfg(adversarial=False, freeze_discriminator=True)
    st = tr.TrainState.fresh(POSE, cfg)
    new, hist = tr.train(st, data, cfg)
    assert all(m.k == 0.0 for m in hist)
    for k in st.disc.params:
        assert np.array_equal(new.disc.params[k], st.disc.params[k])


def test_bit_identical_runs(data):
    cfg = small_cfg()
    a, ha = tr.train(tr.TrainState.fresh(POSE, cfg), data, cfg)
    b, hb = tr.train(tr.TrainState.fresh(POSE, cfg), data, cfg)
    same_state(a, b)
    assert [m.csv_row() for m in ha] == [m.csv_row() for m in hb]


def test_batches_depend_only_on_seed_and_iteration():
    assert np.array_equal(tr.batch_indices(1, 5, 100, 16), tr.batch_indices(1, 5, 100, 16))
    assert not np.array_equal(tr.batch_indices(1, 5, 100, 16), tr.batch_indices(1, 6, 100, 16))
    assert len(tr.batch_indices(0, 0, 3, 16)) == 3


def test_resume_equivalence(data, tmp_path):
    cfg = small_cfg()
    full, _ = tr.train(tr.TrainState.fresh(POSE, cfg), data, cfg)
    half, _ = tr.train(tr.TrainState.fresh(POSE, cfg), data, cfg, iterations=5)
    path = tmp_path / "c.amil"
    tr.save_checkpoint(path, half)
    resumed, _ = tr.train(tr.load_checkpoint(path), data, cfg)
    same_state(full, resumed)


def test_frozen_disc_loss_nonincreasing():
    four = pd.stack_samples(pd.generate_dataset(4, 21, POSE), POSE)
    cfg = tr.TrainConfig(batch_size=4, adversarial=False, freeze_discriminator=True, total_iterations=50)
    _, hist = tr.train(tr.TrainState.fresh(POSE, cfg), four, cfg)
    losses = [m.gen_loss for m in hist]
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 3, losses


def test_divergence_guard(data):
    cfg = small_cfg()
    st = tr.TrainState.fresh(POSE, cfg)
    st.gen.params["out.bias"][...] = 1e4
    with pytest.raises(TrainingDivergence) as exc:
        tr.train_step(st, data.images[:4], data.heatmaps[:4], cfg)
    assert exc.value.iteration == 0 and "gen_loss" in exc.value.losses
    st.gen.params["out.bias"][0] = np.nan
    with pytest.raises(TrainingDivergence):
        tr.train_step(st, data.images[:4], data.heatmaps[:4], cfg)


def test_metrics_row_format():
    m = tr.StepMetrics(3, 1.0, 2.0, 0.5, 4.0, 0.25, 0.001)
    assert m.csv_row() == "3,1.0,2.0,0.5,4.0,0.25,0.001"
    assert tr.METRICS_HEADER == "iter,l_real,l_fake,l_D,gen_loss,k,lr"


# -- checkpoints -----------------------------------------------------------------------

def test_checkpoint_roundtrip(data, tmp_path):
    cfg = small_cfg(pooling="max")
    st, _ = tr.train(tr.TrainState.fresh(POSE, cfg), data, cfg, iterations=2)
    path = tmp_path / "c.amil"
    tr.save_checkpoint(path, st)
    same_state(st, tr.load_checkpoint(path))
    assert tr.load_checkpoint(path).gen.pooling == "max"
    assert not (tmp_path / "c.amil.tmp").exists()


def test_checkpoint_layout():
    buf = tr.encode_tensors({"a": np.array([1.0, 2.0])})
    assert buf[:4] == b"AMIL"
    assert buf[4:8] == (1).to_bytes(4, "little")
    assert buf[8:10] == (1).to_bytes(2, "little") and buf[10:11] == b"a"
    assert buf[11] == 1 and int.from_bytes(buf[12:20], "little") == 2
    words = np.array([1.0, 2.0]).view("<u8")
    assert int.from_bytes(buf[-8:], "little") == int(words[0]) + int(words[1])


def test_checksum_wraps_without_warning():
    import warnings
    t = {"big": np.full(8, -np.inf)}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = tr.decode_tensors(tr.encode_tensors(t))
    assert np.array_equal(back["big"], t["big"])


def test_truncated_checkpoint(tmp_path):
    cfg = small_cfg()
    buf = tr.encode_tensors(tr.state_to_tensors(tr.TrainState.fresh(POSE, cfg)))
    for cut in (5, 40, len(buf) // 2, len(buf) - 3):
        with pytest.raises(ParseError) as exc:
            tr.decode_tensors(buf[:cut])
        assert exc.value.offset is not None
    path = tmp_path / "t.amil"
    path.write_bytes(buf[: len(buf) // 2])
    with pytest.raises(ParseError):
        tr.load_checkpoint(path)


def test_corrupt_and_version(tmp_path):
    buf = bytearray(tr.encode_tensors({"a": np.array([1.0])}))
    flipped = bytearray(buf)
    flipped[-10] ^= 1
    with pytest.raises(ParseError, match="checksum"):
        tr.decode_tensors(bytes(flipped))
    buf[4] = 2
    with pytest.raises(VersionError):
        tr.decode_tensors(bytes(buf))
    with pytest.raises(ParseError):
        tr.decode_tensors(b"NOPE" + bytes(12))
