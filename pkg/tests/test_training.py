import csv
import json

import numpy as np
import pytest

from lapgsr.autograd import Tape, Tensor, backward, mse
from lapgsr.data import DatasetSplit, load_dataset, synth_generate
from lapgsr.errors import DataError, NonFiniteError, ShapeError
from lapgsr.model import Discriminator, Generator, GeneratorConfig
from lapgsr.training import (
    OptimState,
    TrainConfig,
    augment_flip,
    augment_shift,
    combined_loss,
    draw_shift,
    flip_triple,
    gan_d_loss,
    gan_g_loss,
    generator_gradients,
    make_batch,
    sample_patches,
    shift_image,
    train_loop,
    train_step,
)

TINY_GEN = GeneratorConfig(1, 1, 1, width_ltb=8, width_mtb=8, width_htb=4, width_stem=4)


def tiny_cfg(**kw):
    base = dict(batch=4, epochs=2, seed=5, lr_patch=(4, 4), generator=TINY_GEN, lr_g=1e-3, lr_d=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synth_generate(10, 3, root, (32, 48))
    return load_dataset(root)


def const(v, shape=(2, 1, 3, 3)):
    return Tensor(np.full(shape, v, np.float32))


def random_batch(rng, n=2, lr=(4, 4)):
    h, w = lr
    return (rng.random((n, 1, 4 * h, 4 * w)).astype(np.float32),
            rng.random((n, 1, h, w)).astype(np.float32),
            rng.random((n, 1, 4 * h, 4 * w)).astype(np.float32))


def models(seed=0, gen_cfg=TINY_GEN):
    rng = np.random.default_rng(seed)
    gen = Generator(gen_cfg, rng)
    for branch in (gen.ltb, gen.mtb, gen.htb):
        branch.tail.weight.data[...] = 0.1 * rng.standard_normal(branch.tail.weight.shape)
    return gen, Discriminator(1, rng)


class TestLosses:
    @pytest.mark.parametrize("d_fake,expected", [(1.0, 0.0), (0.0, 0.5), (-1.0, 2.0)])
    def test_lsgan_generator(self, d_fake, expected):
        assert gan_g_loss(const(d_fake)).item() == pytest.approx(expected, abs=1e-7)

    @pytest.mark.parametrize("d_real,d_fake,expected", [(1.0, 0.0, 0.0), (0.0, 1.0, 1.0),
                                                        (0.5, 0.5, 0.25)])
    def test_lsgan_discriminator(self, d_real, d_fake, expected):
        assert gan_d_loss(const(d_real), const(d_fake)).item() == pytest.approx(expected, abs=1e-7)

    def test_other_variants(self):
        zero = const(0.0)
        assert gan_g_loss(zero, "vanilla").item() == pytest.approx(np.log(2), abs=1e-6)
        assert gan_d_loss(zero, zero, "vanilla").item() == pytest.approx(2 * np.log(2), abs=1e-6)
        assert gan_g_loss(const(0.3), "wgan").item() == pytest.approx(-0.3)
        assert gan_d_loss(const(0.5), const(0.2), "wgan").item() == pytest.approx(-0.3)
        assert gan_g_loss(const(0.3), "hinge").item() == pytest.approx(-0.3)
        assert gan_d_loss(const(2.0), const(-2.0), "hinge").item() == 0
        assert gan_d_loss(zero, zero, "hinge").item() == pytest.approx(2.0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            gan_g_loss(const(0.0), "relativistic")

    @pytest.mark.parametrize("lam,l_mse,l_adv,expected", [
        (0, 0.3, 0.7, 0.7), (4500, 0.001, 0.5, 5.0), (1500, 0.002, 0.1, 3.1), (4500, 0.0, 0.0, 0.0)])
    def test_combined(self, lam, l_mse, l_adv, expected):
        out = combined_loss(Tensor(np.float32(l_mse)), Tensor(np.float32(l_adv)), lam).item()
        assert out == pytest.approx(expected, rel=1e-6, abs=1e-7)

    def test_combined_monotone_in_lambda(self):
        l_mse, l_adv = Tensor(np.float32(0.01)), Tensor(np.float32(0.2))
        values = [combined_loss(l_mse, l_adv, lam).item() for lam in (0, 10, 1500, 4500)]
        assert values == sorted(values) and len(set(values)) == 4


class TestAugmentation:
    def triple(self, rng):
        return (rng.random((1, 8, 12)), rng.random((1, 2, 3)), rng.random((1, 8, 12)))

    def test_flip_disabled(self):
        rng = np.random.default_rng(0)
        t = self.triple(rng)
        out = augment_flip(t, rng, p=0)
        for a, b in zip(t, out):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("h,v", [(True, False), (False, True), (True, True)])
    def test_flip_involution(self, h, v):
        t = self.triple(np.random.default_rng(1))
        twice = flip_triple(flip_triple(t, h, v), h, v)
        for a, b in zip(t, twice):
            np.testing.assert_array_equal(a, b)

    def test_same_decision_for_all_three(self):
        rng = np.random.default_rng(2)
        base = np.arange(8 * 12, dtype=float).reshape(1, 8, 12)
        for _ in range(50):
            g, _, hr = augment_flip((base, base[:, :2, :3], base.copy()), rng)
            np.testing.assert_array_equal(g, hr)

    def test_flip_frequency(self):
        rng = np.random.default_rng(3)
        img = np.arange(4.0).reshape(1, 2, 2)
        flips_h = flips_v = 0
        n = 10_000
        for _ in range(n):
            out = augment_flip((img, img, img), rng, 0.5)[0]
            flips_h += out[0, 0, 0] in (1.0, 3.0)
            flips_v += out[0, 0, 0] in (2.0, 3.0)
        assert 0.48 <= flips_h / n <= 0.52 and 0.48 <= flips_v / n <= 0.52

    def test_shift_disabled(self):
        g = np.random.default_rng(4).random((1, 24, 32))
        assert augment_shift(g, 0.0, np.random.default_rng(0)) is g

    def test_shift_bounds(self):
        rng = np.random.default_rng(5)
        shifts = np.array([draw_shift((240, 320), 0.1, rng) for _ in range(2000)])
        assert np.abs(shifts[:, 0]).max() <= 32 and np.abs(shifts[:, 1]).max() <= 24
        assert np.abs(shifts[:, 0]).max() >= 28

    @pytest.mark.parametrize("dx,dy", [(3, -2), (-5, 4), (0, 7)])
    def test_shift_interior_round_trip(self, dx, dy):
        g = np.random.default_rng(6).random((1, 24, 32))
        back = shift_image(shift_image(g, dx, dy), -dx, -dy)
        inner = (slice(None), slice(abs(dy), 24 - abs(dy)), slice(abs(dx), 32 - abs(dx)))
        np.testing.assert_array_equal(back[inner], g[inner])

    def test_shift_replicates_border(self):
        g = np.arange(12.0).reshape(1, 3, 4)
        out = shift_image(g, 2, 0)
        np.testing.assert_array_equal(out[0], g[0][:, [0, 0, 0, 1]])

    def test_batch_leaves_thermal_alone(self, corpus):
        cfg = tiny_cfg(shift_limit=0.3, flip_prob=0.0)
        sample = corpus.train[0]
        lr_before, hr_before = sample.thermal_lr.copy(), sample.thermal_hr.copy()
        guide, lr, hr = make_batch([sample], cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(sample.thermal_lr, lr_before)
        np.testing.assert_array_equal(sample.thermal_hr, hr_before)


class TestPatches:
    def test_degenerate_window(self):
        rng = np.random.default_rng(0)
        t = (rng.random((1, 120, 160)), rng.random((1, 30, 40)), rng.random((1, 120, 160)))
        p = sample_patches(t, (40, 30), rng)
        assert p.lr_offset == (0, 0)
        for a, b in zip(t, p[:3]):
            np.testing.assert_array_equal(a, b)

    def test_alignment_and_content(self):
        rng = np.random.default_rng(1)
        t = (rng.random((1, 240, 320)), rng.random((1, 60, 80)), rng.random((1, 240, 320)))
        for _ in range(20):
            p = sample_patches(t, (40, 30), rng)
            oy, ox = p.lr_offset
            assert p.thermal_lr.shape == (1, 30, 40) and p.guide.shape == (1, 120, 160)
            np.testing.assert_array_equal(p.thermal_lr, t[1][:, oy:oy + 30, ox:ox + 40])
            np.testing.assert_array_equal(p.thermal_hr, t[2][:, 4 * oy:4 * oy + 120, 4 * ox:4 * ox + 160])
            np.testing.assert_array_equal(p.guide, t[0][:, 4 * oy:4 * oy + 120, 4 * ox:4 * ox + 160])

    def test_too_small(self):
        t = (np.zeros((1, 100, 160)), np.zeros((1, 25, 40)), np.zeros((1, 100, 160)))
        with pytest.raises(ShapeError):
            sample_patches(t, (40, 30), np.random.default_rng(0))


def flat(grads):
    return np.concatenate([g.ravel() for g in grads.values() if g is not None])


class TestTrainStep:
    def test_huge_lambda_follows_mse_gradient(self):
        gen, disc = models(0)
        batch = random_batch(np.random.default_rng(1))
        *_, grads = generator_gradients(batch, gen, disc, tiny_cfg(lam=1e9))
        combined = flat(grads)
        with Tape() as tape:
            loss = mse(gen(batch[0], batch[1]).y_raw, batch[2])
        backward(loss, tape)
        pure = flat({k: p.grad for k, p in gen.parameters().items()})
        cos = combined @ pure / (np.linalg.norm(combined) * np.linalg.norm(pure))
        assert cos > 0.999

    def test_satisfied_discriminator_gives_no_adversarial_gradient(self):
        gen, disc = models(2)
        for p in disc.parameters().values():
            p.data[...] = 0
        disc.score.bias.data[...] = 1.0
        batch = random_batch(np.random.default_rng(3))
        l_mse, l_adv, _, grads = generator_gradients(batch, gen, disc, tiny_cfg(lam=0.0))
        assert l_adv == 0 and l_mse > 0
        assert all(g is None or not np.any(g) for g in grads.values())

    def test_updates_touch_only_their_model(self):
        gen, disc = models(4)
        batch = random_batch(np.random.default_rng(5))
        g_before = {k: v.copy() for k, v in gen.state_arrays().items()}
        d_before = {k: v.copy() for k, v in disc.state_arrays().items()}
        states = OptimState.fresh(gen, disc)
        terms = train_step(batch, gen, disc, states, tiny_cfg())
        assert states.adam_g.t == 1 and states.adam_d.t == 1
        assert any(not np.array_equal(v, g_before[k]) for k, v in gen.state_arrays().items())
        assert any(not np.array_equal(v, d_before[k]) for k, v in disc.state_arrays().items())
        assert terms.l_total == pytest.approx(4500 * terms.l_mse + terms.l_g_adv, rel=1e-5)
        # the discriminator step alone leaves the generator as it was
        from lapgsr.training import discriminator_update
        snap = {k: v.copy() for k, v in gen.state_arrays().items()}
        discriminator_update(batch[2], batch[2], disc, states.adam_d, tiny_cfg())
        assert all(np.array_equal(v, snap[k]) for k, v in gen.state_arrays().items())

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            gen, disc = models(6)
            states = OptimState.fresh(gen, disc)
            rng = np.random.default_rng(7)
            runs.append([train_step(random_batch(rng), gen, disc, states, tiny_cfg()).as_tuple()
                         for _ in range(3)])
        assert runs[0] == runs[1]

    def test_non_finite_names_term(self):
        gen, disc = models(8)
        guide, lr, hr = random_batch(np.random.default_rng(9))
        hr[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError) as err:
            train_step((guide, lr, hr), gen, disc, OptimState.fresh(gen, disc), tiny_cfg())
        assert err.value.where in ("l_d", "l_mse", "l_g_adv", "l_total")

    def test_single_batch_mse_decreases(self, corpus):
        # default learning rates; 1e-3 overshoots the bicubic starting point for a few steps
        cfg = tiny_cfg(lr_patch=(8, 8), lr_g=1e-4, lr_d=1e-4)
        gen = Generator(cfg.generator, np.random.default_rng(10))
        disc = Discriminator(1, np.random.default_rng(11))
        batch = make_batch(corpus.train[:4], cfg, np.random.default_rng(12))
        states = OptimState.fresh(gen, disc)
        losses = [train_step(batch, gen, disc, states, cfg).l_mse for _ in range(51)]
        drops = sum(b < a for a, b in zip(losses, losses[1:]))
        assert drops >= 45


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_cfg(shift_limit=0.1, gan_variant="hinge")
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.load(path) == cfg

    def test_field_names(self):
        d = TrainConfig().to_dict()
        assert {"lam", "lr_g", "lr_d", "batch", "epochs", "seed", "lr_patch", "flip_prob",
                "shift_limit", "gan_variant", "checkpoint_every", "generator"} <= set(d)
        assert d["lam"] == 4500 and d["lr_patch"] == [40, 30] and d["batch"] == 12

    @pytest.mark.parametrize("bad", [dict(lam=-1), dict(flip_prob=1.5), dict(shift_limit=0.5),
                                     dict(gan_variant="x"), dict(batch=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_unknown_field(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"lambda": 3})

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            TrainConfig.load(tmp_path / "none.json")


class TestLoop:
    def read_log(self, path):
        with open(path, newline="") as fh:
            return list(csv.reader(fh))

    def test_log_and_checkpoints(self, corpus, tmp_path):
        cfg = tiny_cfg(epochs=3, checkpoint_every=2)
        result = train_loop(corpus, cfg, tmp_path)
        rows = self.read_log(result.log_path)
        assert rows[0] == ["epoch", "step", "l_mse", "l_g_adv", "l_d", "l_total", "val_psnr", "val_ssim"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        assert [r[1] for r in rows[1:]] == ["2", "4", "6"]
        assert all(all(cell != "" for cell in r) for r in rows[1:])
        names = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.json"))
        assert names == ["best.json", "epoch_0002.json", "last.json"]
        assert len(result.history) == 6

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        full = train_loop(corpus, tiny_cfg(epochs=3), tmp_path / "full")
        part = train_loop(corpus, tiny_cfg(epochs=1), tmp_path / "part")
        resumed = train_loop(corpus, tiny_cfg(epochs=3), tmp_path / "part", resume=part.last_path)
        assert [t.as_tuple() for t in resumed.history] == [t.as_tuple() for t in full.history[2:]]
        assert full.log_path.read_bytes() == resumed.log_path.read_bytes()
        assert (tmp_path / "full/checkpoints/last.bin").read_bytes() == \
            (tmp_path / "part/checkpoints/last.bin").read_bytes()

    def test_empty_training_split(self, tmp_path):
        with pytest.raises(DataError):
            train_loop(DatasetSplit(), tiny_cfg(), tmp_path)

    def test_unwritable_output(self, corpus, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            train_loop(corpus, tiny_cfg(epochs=1), blocker / "sub")
