import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hlsf import checkpoint
from hlsf.config import ModelConfig, TrainConfig, apply_recipe
from hlsf.errors import ConfigError, InvalidInputError, TrainingDivergedError
from hlsf.features import build_examples, collate
from hlsf.model import GaussianLatent, build_model
from hlsf.scenes import DatasetSpec, generate_synthetic_dataset
from hlsf.train import (Trainer, beta_schedule, elbo_loss, fit, forward_losses, gan_losses,
                        kl_divergence, mode_bce_loss, step_noise)

import oracles

TINY = dict(M=3, D=2, F=10, T=4, history_embed=4, history_hidden=4, lane_embed=5, lane_hidden=5,
            attn_hidden=3, message=3, node_hidden=4, mode_embed=6, head_hidden=5,
            decoder_embed=3, decoder_hidden=6, disc_embed=3, disc_hidden=4)


def scenes(n, seed=0, templates=("fork3",)):
    spec = DatasetSpec(templates=list(templates), n=n, seed=seed)
    return list(generate_synthetic_dataset(spec))


def tiny_trainer(recipe="M5", model_kw=None, train_kw=None, dtype=torch.float32):
    m, t = apply_recipe(recipe, {**TINY, **(model_kw or {})}, train_kw or {})
    tr = Trainer(m, t, recipe, dtype)
    tr.state.total_steps = 100
    return tr


def tiny_batch(cfg, n=4, seed=0, dtype=torch.float32):
    return collate(build_examples(scenes(n, seed), cfg), dtype)


def gauss(mu, sigma):
    return GaussianLatent(torch.as_tensor(mu, dtype=torch.float64),
                          torch.as_tensor(sigma, dtype=torch.float64))


# -- ELBO -------------------------------------------------------------------


def test_kl_hand_case():
    kl = kl_divergence(gauss([1.0, 0.0], [1.0, 1.0]), gauss([0.0, 0.0], [1.0, 1.0]))
    assert float(kl) == 0.5


def test_kl_identity_and_oracle(rng):
    for _ in range(20):
        mu_q, mu_p = rng.normal(size=4), rng.normal(size=4)
        s_q, s_p = rng.uniform(0.2, 2, 4), rng.uniform(0.2, 2, 4)
        assert float(kl_divergence(gauss(mu_q, s_q), gauss(mu_q, s_q))) == pytest.approx(0, abs=1e-12)
        assert float(kl_divergence(gauss(mu_q, s_q), gauss(mu_p, s_p))) == pytest.approx(
            oracles.kl_gauss(mu_q, s_q, mu_p, s_p), rel=1e-12)


def test_kl_monte_carlo(rng):
    mu_q, mu_p = rng.normal(size=3), rng.normal(size=3)
    s_q, s_p = rng.uniform(0.5, 1.5, 3), rng.uniform(0.5, 1.5, 3)
    z = mu_q + s_q * rng.standard_normal((100_000, 3))
    logq = -0.5 * (((z - mu_q) / s_q) ** 2).sum(1) - np.log(s_q).sum()
    logp = -0.5 * (((z - mu_p) / s_p) ** 2).sum(1) - np.log(s_p).sum()
    diff = logq - logp
    se = diff.std() / math.sqrt(len(diff))
    kl = float(kl_divergence(gauss(mu_q, s_q), gauss(mu_p, s_p)))
    assert abs(diff.mean() - kl) < 3 * se


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(InvalidInputError):
        kl_divergence(gauss([0.0], [0.0]), gauss([0.0], [1.0]))


def test_elbo_recon():
    Y = torch.randn(2, 5, 2, dtype=torch.float64)
    q = gauss(np.zeros((2, 3)), np.ones((2, 3)))
    recon, kl = elbo_loss(Y, Y.clone(), q, q)
    assert float(recon) == 0 and float(kl) == 0
    recon, _ = elbo_loss(Y, Y + torch.tensor([3.0, 4.0], dtype=torch.float64), q, q)
    assert float(recon) == pytest.approx(25.0)
    with pytest.raises(InvalidInputError):
        elbo_loss(Y, Y[:, :4], q, q)


# -- mode loss --------------------------------------------------------------


def test_bce_uniform_value():
    loss = mode_bce_loss(torch.zeros(10, dtype=torch.float64), 3)
    assert float(loss) == pytest.approx(-math.log(0.1) - 9 * math.log(0.9), abs=1e-12)
    assert float(loss) == pytest.approx(3.250830, abs=1e-6)


def test_bce_matches_oracle(rng):
    for M in (2, 3, 7, 10):
        logits = rng.normal(size=M) * 3
        gt = int(rng.integers(M))
        got = float(mode_bce_loss(torch.as_tensor(logits), gt))
        assert got == pytest.approx(oracles.bce_elementwise(logits, gt), rel=1e-10)


def test_bce_perfect_prediction():
    logits = torch.full((5,), -30.0, dtype=torch.float64)
    logits[2] = 30.0
    assert float(mode_bce_loss(logits, 2)) < 1e-10


def test_bce_gradient_finite_difference():
    logits = torch.zeros(10, dtype=torch.float64, requires_grad=True)
    mode_bce_loss(logits, 4).backward()
    h = 1e-6
    for i in range(10):
        e = torch.zeros(10, dtype=torch.float64)
        e[i] = h
        fd = (float(mode_bce_loss(e, 4)) - float(mode_bce_loss(-e, 4))) / (2 * h)
        assert float(logits.grad[i]) == pytest.approx(fd, abs=1e-7)


def test_bce_categorical_flag():
    logits = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
    cat = mode_bce_loss(logits, 1, "categorical")
    assert float(cat) == pytest.approx(-float(torch.log_softmax(logits, 0)[1]))
    assert float(mode_bce_loss(logits, 1)) > float(cat)


def test_bce_bad_index():
    with pytest.raises(InvalidInputError):
        mode_bce_loss(torch.zeros(3), 3)


# -- adversarial ------------------------------------------------------------


def test_gan_logit_zero():
    d, g = gan_losses(torch.zeros(4, dtype=torch.float64), torch.zeros(8, dtype=torch.float64))
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(g) == pytest.approx(math.log(2), abs=1e-12)


def test_gan_saturation():
    d, _ = gan_losses(torch.full((3,), 60.0), torch.full((6,), -60.0))
    assert float(d) < 1e-20


def test_gan_g_gradient_finite_difference():
    tr = tiny_trainer(dtype=torch.float64)
    model, disc = tr.model, tr.disc
    batch = tiny_batch(model.cfg, 2, dtype=torch.float64)
    eps_post, eps_prior = step_noise(0, 0, 2, 1, model.cfg.D, torch.float64)

    def gan_g():
        return forward_losses(model, disc, batch, eps_post, eps_prior, tr.cfg, 0.0)["gan_g"]

    model.zero_grad()
    gan_g().backward()
    h = 1e-6
    for name in ("decoder.out.weight", "decoder.cell.weight_ih"):
        p = dict(model.named_parameters())[name]
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 6)):
            old = float(flat[i])
            flat[i] = old + h
            up = gan_g().item()
            flat[i] = old - h
            dn = gan_g().item()
            flat[i] = old
            assert float(grad[i]) == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-9)


# -- annealing --------------------------------------------------------------


def test_beta_examples():
    assert beta_schedule(0, 400) == 0.0
    assert beta_schedule(25, 400) == pytest.approx(0.25)
    assert beta_schedule(75, 400) == 0.5
    assert beta_schedule(100, 400) == 0.0


@given(st.integers(0, 10**5), st.integers(1, 10**4), st.integers(1, 8),
       st.floats(0.05, 1.0), st.floats(0.0, 2.0))
def test_beta_bounded_and_periodic(step, total, cycles, ramp, bmax):
    b = beta_schedule(step, total, cycles, ramp, bmax)
    assert 0.0 <= b <= bmax + 1e-12
    if total % cycles == 0:
        period = total // cycles
        assert beta_schedule(step + period, total, cycles, ramp, bmax) == pytest.approx(b)


def test_beta_bad_args():
    with pytest.raises(InvalidInputError):
        beta_schedule(0, 10, cycles=0)
    with pytest.raises(InvalidInputError):
        beta_schedule(0, 10, ramp_fraction=0.0)


# -- training step ----------------------------------------------------------


def test_single_example_step_changes_parameters():
    tr = tiny_trainer()
    before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    bd = tr.train_step(tiny_batch(tr.model.cfg, 1))
    assert bd.finite()
    assert bd.total == pytest.approx(bd.recon + bd.beta * bd.kl + bd.bce + 0.01 * bd.gan_g,
                                     rel=1e-5)
    assert any(not torch.equal(before[k], v) for k, v in tr.model.state_dict().items())
    assert tr.state.step == 1


def test_kappa_zero_isolates_discriminator():
    kw = {"kappa": 0.0}
    a, b = tiny_trainer(train_kw=kw), tiny_trainer(train_kw=kw)
    with torch.no_grad():
        for p in b.disc.parameters():
            p.add_(torch.randn_like(p))
    batch = tiny_batch(a.model.cfg, 3)
    a.train_step(batch)
    b.train_step(batch)
    for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(va, vb), k


def test_no_gan_recipes_have_no_discriminator():
    for recipe in ("M1", "M2", "M3", "M4", "Baseline", "Baseline+BOM"):
        m, t = apply_recipe(recipe, TINY if recipe.startswith("M") else {
            k: v for k, v in TINY.items() if k != "node_hidden"})
        _, disc = build_model(m)
        assert disc is None and t.kappa == 0.0


def test_discriminator_trains_with_gan():
    tr = tiny_trainer()
    before = [p.clone() for p in tr.disc.parameters()]
    bd = tr.train_step(tiny_batch(tr.model.cfg, 3))
    assert bd.gan_d > 0
    assert any(not torch.equal(a, b) for a, b in zip(before, tr.disc.parameters()))


def test_loss_decreases_on_fixed_batch():
    cfg, tcfg = apply_recipe("M5")
    tr = Trainer(cfg, tcfg, "M5")
    tr.state.total_steps = 50
    batch = collate(build_examples(scenes(8, seed=5), cfg))
    eps = step_noise(99, 0, 8, 1, cfg.D, torch.float32)

    def loss():
        with torch.no_grad():
            out = forward_losses(tr.model, tr.disc, batch, *eps, tcfg, 0.5)
        return out["total"].item()

    start = loss()
    for _ in range(50):
        tr.train_step(batch)
    assert loss() < start


def test_non_finite_loss_aborts():
    tr = tiny_trainer()
    batch = tiny_batch(tr.model.cfg, 2)
    batch["fut_xy"][0, 0, 0] = float("nan")
    with pytest.raises(TrainingDivergedError) as info:
        tr.train_step(batch)
    assert info.value.snapshot["step"] == 0


def test_bom_backprops_best_sample():
    m, t = apply_recipe("Baseline+BOM", {k: v for k, v in TINY.items() if k != "node_hidden"})
    tr = Trainer(m, t, "Baseline+BOM", torch.float64)
    batch = tiny_batch(m, 2, dtype=torch.float64)
    eps_post, eps_prior = step_noise(0, 0, 2, 5, m.D, torch.float64)
    out = forward_losses(tr.model, None, batch, eps_post, eps_prior, t, 0.0)
    per = []
    for s in range(5):
        o = forward_losses(tr.model, None, batch, eps_post[:, s:s + 1], eps_prior, t, 0.0)
        per.append(o["recon"].item())
    # batch-mean of per-example minimum is no larger than any single-sample recon
    assert out["recon"].item() <= min(per) + 1e-12


# -- persistence ------------------------------------------------------------


def test_resume_is_bit_identical(tmp_path):
    tr = tiny_trainer()
    batches = [tiny_batch(tr.model.cfg, 3, seed=s) for s in range(4)]
    for b in batches[:3]:
        tr.train_step(b)
    tr.save(tmp_path / "c.ckpt")
    bd_a = tr.train_step(batches[3])
    other = tiny_trainer()
    other.load(tmp_path / "c.ckpt")
    bd_b = other.train_step(batches[3])
    assert bd_a == bd_b
    for va, vb in zip(tr.model.state_dict().values(), other.model.state_dict().values()):
        assert torch.equal(va, vb)


def test_checkpoint_save_load_save_identical(tmp_path):
    tr = tiny_trainer()
    tr.train_step(tiny_batch(tr.model.cfg, 2))
    tr.save(tmp_path / "a.ckpt")
    other = tiny_trainer()
    other.load(tmp_path / "a.ckpt")
    other.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    model, disc, header = checkpoint.load_model(tmp_path / "a.ckpt")
    assert header["recipe"] == "M5" and disc is not None
    for va, vb in zip(model.state_dict().values(), tr.model.state_dict().values()):
        assert torch.equal(va, vb)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"nope")
    with pytest.raises(Exception):
        checkpoint.read(p)


# -- recipes and fit --------------------------------------------------------


def test_recipe_contradictions():
    with pytest.raises(ConfigError):
        apply_recipe("Baseline", train_overrides={"alpha": 1.0})
    with pytest.raises(ConfigError):
        apply_recipe("M4", train_overrides={"kappa": 0.01})
    with pytest.raises(ConfigError):
        apply_recipe("M3", model_overrides={"v2i": True})
    with pytest.raises(ConfigError):
        apply_recipe("M9")


def test_defaults():
    t = TrainConfig()
    assert (t.lr, t.batch_size, t.val_every, t.alpha, t.kappa, t.beta_max) == (
        1e-4, 8, 3, 1.0, 0.01, 0.5)
    m, t = apply_recipe("Baseline")
    assert not m.hierarchical and t.alpha == 0.0 and t.kappa == 0.0


def test_fit_smoke(tmp_path):
    cfg, tcfg = apply_recipe("M5", train_overrides={"epochs": 5})
    res = fit(scenes(200, seed=3), cfg, tcfg, "M5", out_dir=tmp_path)
    assert res.best_checkpoint.exists() and res.last_checkpoint.exists()
    assert math.isfinite(res.best_val)
    lines = res.metrics_path.read_text().splitlines()
    assert lines[0] == "step,recon,kl,bce,gan_g,gan_d,beta,val_minade"
    assert len(lines) == 1 + res.trainer.state.step
    assert sum(1 for l in lines[1:] if not l.endswith(",")) == 2  # epochs 3 and 5


def test_fit_resume_matches_uninterrupted(tmp_path):
    data = scenes(40, seed=4)
    cfg, tcfg = apply_recipe("M5", TINY, {"epochs": 4, "val_every": 1})
    full = fit(data, cfg, tcfg, "M5", out_dir=tmp_path / "full")

    class Stop(Exception):
        pass

    def interrupt(msg):
        if msg.startswith("epoch 3 "):
            raise Stop

    with pytest.raises(Stop):
        fit(data, cfg, tcfg, "M5", out_dir=tmp_path / "part", log=interrupt)
    header, _ = checkpoint.read(tmp_path / "part" / "ckpt" / "last.ckpt")
    assert header["state"]["epoch"] == 2
    again = fit(data, cfg, tcfg, "M5", out_dir=tmp_path / "part", resume=True)
    assert again.metrics_path.read_bytes() == full.metrics_path.read_bytes()
    for name in ("best.ckpt", "last.ckpt"):
        assert ((tmp_path / "part" / "ckpt" / name).read_bytes()
                == (tmp_path / "full" / "ckpt" / name).read_bytes())


def test_fit_empty():
    with pytest.raises(InvalidInputError):
        fit([], *apply_recipe("M5", TINY))


@pytest.mark.slow
def test_m5_not_worse_than_m1(fork_runs, tmp_path):
    # same data, seed and default training config as the shared M5 run
    cfg, tcfg = apply_recipe("M1")
    m1 = fit(fork_runs["train"], cfg, tcfg, "M1", out_dir=tmp_path / "M1").best_val
    assert fork_runs["M5"]["best_val"] <= m1
