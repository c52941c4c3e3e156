"""Objectives, annealing and the optimization loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from hlsf import checkpoint
from hlsf.config import ModelConfig, TrainConfig
from hlsf.errors import InvalidInputError, TrainingDivergedError
from hlsf.features import Example, build_examples, collate
from hlsf.model import GaussianLatent, build_model

METRIC_FIELDS = ["step", "recon", "kl", "bce", "gan_g", "gan_d", "beta", "val_minade"]


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def kl_divergence(q: GaussianLatent, p: GaussianLatent):
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if bool((q.sigma <= 0).any()) or bool((p.sigma <= 0).any()):
        raise InvalidInputError("standard deviations must be positive")
    var_q, var_p = q.sigma ** 2, p.sigma ** 2
    return 0.5 * (torch.log(var_p / var_q) + (var_q + (q.mu - p.mu) ** 2) / var_p - 1.0).sum(-1)


def elbo_loss(Y, Y_hat, posterior: GaussianLatent, prior: GaussianLatent, beta=None):
    """(recon, kl) averaged over the batch.

    recon is the per-timestep squared distance averaged over time; ``beta``
    is accepted for symmetry with the total loss and does not scale ``kl``.
    """
    if Y.shape != Y_hat.shape:
        raise InvalidInputError(f"trajectory shapes differ: {tuple(Y.shape)} vs {tuple(Y_hat.shape)}")
    recon = ((Y_hat - Y) ** 2).sum(-1).mean(-1)
    kl = kl_divergence(posterior, prior)
    return recon.mean(), kl.mean()


def mode_bce_loss(logits, gt, kind: str = "elementwise"):
    """Cross entropy between the softmax of ``logits`` and one-hot ``gt``.

    ``elementwise`` sums a binary cross entropy over every entry of the
    weight vector; ``categorical`` keeps only the ground-truth term.
    """
    logits = torch.as_tensor(logits)
    gt = torch.as_tensor(gt, dtype=torch.long)
    if logits.ndim == 1:
        return mode_bce_loss(logits.unsqueeze(0), gt.reshape(1), kind)
    M = logits.shape[-1]
    if bool(((gt < 0) | (gt >= M)).any()):
        raise InvalidInputError(f"gt index out of range for {M} modes")
    log_w = torch.log_softmax(logits, dim=-1)
    pos = log_w.gather(-1, gt.unsqueeze(-1)).squeeze(-1)
    if kind == "categorical":
        return -pos.mean()
    if kind != "elementwise":
        raise InvalidInputError(f"unknown mode loss {kind!r}")
    if M == 1:
        return -pos.mean()
    # log(1 - w_m) = logsumexp over l != m minus logsumexp over all l
    eye = torch.eye(M, dtype=torch.bool, device=logits.device)
    others = logits.unsqueeze(-2).masked_fill(eye, float("-inf"))
    log_not = torch.logsumexp(others, dim=-1) - torch.logsumexp(logits, dim=-1, keepdim=True)
    onehot = F.one_hot(gt, M).to(torch.bool)
    neg = torch.where(onehot, torch.zeros_like(log_not), log_not).sum(-1)
    return -(pos + neg).mean()


def gan_losses(d_real, d_fake):
    """(discriminator loss, non-saturating generator loss) from raw logits."""
    gan_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    gan_g = F.softplus(-d_fake).mean()
    return gan_d, gan_g


def beta_schedule(step, total_steps, cycles=4, ramp_fraction=0.5, beta_max=0.5) -> float:
    """Cyclical KL weight: linear ramp over ``ramp_fraction`` of each cycle, then hold."""
    if cycles < 1 or not 0 < ramp_fraction <= 1:
        raise InvalidInputError("need cycles >= 1 and 0 < ramp_fraction <= 1")
    period = max(total_steps, 1) / cycles
    pos = (step % period) / period
    return beta_max * min(1.0, pos / ramp_fraction)


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    bce: float
    gan_g: float
    gan_d: float
    total: float
    beta: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def step_noise(seed: int, step: int, batch: int, samples: int, D: int, dtype):
    """Posterior and prior noise for one optimization step."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(step)])
    eps_post = torch.as_tensor(rng.standard_normal((batch, samples, D))).to(dtype)
    eps_prior = torch.as_tensor(rng.standard_normal((batch, D))).to(dtype)
    return eps_post, eps_prior


def forward_losses(model, disc, batch, eps_post, eps_prior, tcfg: TrainConfig, beta: float,
                   include_gan_g: bool = True):
    """All model-side loss terms as tensors.

    Returns a dict with recon, kl, bce, gan_g, total plus the generator-side
    tensors the discriminator step needs (``fakes``, ``real``, ``lanes``).
    """
    cfg = model.cfg
    enc = model.encode(batch)
    B = batch["hist"].shape[0]
    gt = batch["gt"]
    if cfg.hierarchical:
        logits = model.mode_logits(enc.context)
        bce = mode_bce_loss(logits, gt, tcfg.bce)
        ctx = enc.context[torch.arange(B), gt]
    else:
        bce = enc.context.new_zeros(())
        ctx = enc.context[:, 0]
    q = model.posterior_params(model.encode_future(batch["fut"]), ctx)
    p = model.prior_params(ctx)
    start = batch["hist"][:, 0, -1, :2]
    Y = batch["fut_xy"]
    S = eps_post.shape[1]
    z = q.mu.unsqueeze(1) + q.sigma.unsqueeze(1) * eps_post            # (B, S, D)
    Y_hat = model.decode(ctx.repeat_interleave(S, 0), z.reshape(B * S, -1),
                         start.repeat_interleave(S, 0)).reshape(B, S, cfg.T, 2)
    if S > 1:
        with torch.no_grad():
            ade = torch.linalg.vector_norm(Y_hat - Y.unsqueeze(1), dim=-1).mean(-1)
            best = ade.argmin(dim=1)
        Y_sel = Y_hat[torch.arange(B), best]
    else:
        Y_sel = Y_hat[:, 0]
    recon, kl = elbo_loss(Y, Y_sel, q, p)
    total = recon + beta * kl + tcfg.alpha * bce
    out = {"recon": recon, "kl": kl, "bce": bce, "gan_g": recon.new_zeros(())}
    if disc is not None:
        z_p = p.mu + p.sigma * eps_prior
        Y_prior = model.decode(ctx, z_p, start)
        lane_pts = batch["lane_points"][torch.arange(B), gt]
        lane_enc = enc.lane_enc[torch.arange(B), gt].detach()
        fakes = torch.cat([Y_hat[:, 0], Y_prior])
        out.update(fakes=fakes, real=Y, lane_pts=lane_pts, lane_enc=lane_enc)
        if tcfg.kappa != 0 and include_gan_g:
            d_fake = disc(fakes, lane_pts.repeat(2, 1, 1), lane_enc.repeat(2, 1))
            gan_g = F.softplus(-d_fake).mean()
            out["gan_g"] = gan_g
            total = total + tcfg.kappa * gan_g
    out["total"] = total
    return out


def discriminator_loss(disc, real, fakes, lane_pts, lane_enc):
    d_real = disc(real, lane_pts, lane_enc)
    d_fake = disc(fakes.detach(), lane_pts.repeat(2, 1, 1), lane_enc.repeat(2, 1))
    return gan_losses(d_real, d_fake)[0]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best: float = math.inf
    total_steps: int = 0
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"step": self.step, "epoch": self.epoch,
                "best": None if math.isinf(self.best) else self.best,
                "total_steps": self.total_steps}

    @classmethod
    def from_dict(cls, d):
        best = d.get("best")
        return cls(step=int(d["step"]), epoch=int(d["epoch"]),
                   best=math.inf if best is None else float(best),
                   total_steps=int(d.get("total_steps", 0)))


class Trainer:
    """One writer over model, discriminator and their optimizers."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, recipe: str = "M5",
                 dtype=torch.float32):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.recipe = recipe
        self.model, self.disc = build_model(model_cfg)
        self.model.to(dtype)
        if self.disc is not None:
            self.disc.to(dtype)
        self.dtype = dtype
        self.opt = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr)
        self.opt_d = (torch.optim.Adam(self.disc.parameters(), lr=train_cfg.lr)
                      if self.disc is not None else None)
        self.state = TrainState()

    @property
    def optimizers(self):
        return [self.opt] + ([self.opt_d] if self.opt_d is not None else [])

    def beta(self, step=None) -> float:
        step = self.state.step if step is None else step
        c = self.cfg
        return beta_schedule(step, self.state.total_steps or 1, c.cycles, c.ramp_fraction,
                             c.beta_max)

    def train_step(self, batch) -> LossBreakdown:
        c = self.cfg
        step = self.state.step
        beta = self.beta(step)
        B = batch["hist"].shape[0]
        eps_post, eps_prior = step_noise(c.seed, step, B, c.bom_samples, self.model_cfg.D,
                                         self.dtype)
        self.model.train()
        out = forward_losses(self.model, self.disc, batch, eps_post, eps_prior, c, beta,
                             include_gan_g=False)
        gan_d = 0.0
        if self.disc is not None:
            # discriminator first, on detached fakes
            self.opt_d.zero_grad(set_to_none=True)
            loss_d = discriminator_loss(self.disc, out["real"], out["fakes"], out["lane_pts"],
                                        out["lane_enc"])
            gan_d = float(loss_d.detach())
            if math.isfinite(gan_d):
                loss_d.backward()
                torch.nn.utils.clip_grad_norm_(self.disc.parameters(), c.clip_norm)
                self.opt_d.step()
            if c.kappa != 0:
                # generator term against the updated discriminator
                d_fake = self.disc(out["fakes"], out["lane_pts"].repeat(2, 1, 1),
                                   out["lane_enc"].repeat(2, 1))
                gan_g = F.softplus(-d_fake).mean()
                out["total"] = out["total"] + c.kappa * gan_g
                out["gan_g"] = gan_g
        bd = LossBreakdown(recon=out["recon"].item(), kl=out["kl"].item(), bce=out["bce"].item(),
                           gan_g=out["gan_g"].item(), gan_d=gan_d, total=out["total"].item(),
                           beta=beta)
        if not bd.finite():
            raise TrainingDivergedError(f"non-finite loss at step {step}",
                                        {"step": step, **asdict(bd)})
        self.opt.zero_grad(set_to_none=True)
        if self.disc is not None:
            self.disc.requires_grad_(False)
        out["total"].backward()
        if self.disc is not None:
            self.disc.requires_grad_(True)
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), c.clip_norm)
        self.opt.step()
        self.state.step += 1
        return bd

    # -- persistence --------------------------------------------------------

    def save(self, path):
        checkpoint.save(path, self.model, self.disc, self.optimizers, self.state.to_dict(),
                        self.cfg, self.recipe)

    def load(self, path):
        header, arrays = checkpoint.read(path)
        checkpoint.restore(header, arrays, self.model, self.disc, self.optimizers)
        self.state = TrainState.from_dict(header["state"])


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


@dataclass
class FitResult:
    best_checkpoint: Path
    last_checkpoint: Path
    best_val: float
    metrics_path: Path
    trainer: Trainer


def split_train_val(n: int, fraction: float, seed: int):
    idx = np.random.default_rng([int(seed), 1]).permutation(n)
    n_val = int(math.floor(n * fraction))
    if n_val == 0 and fraction > 0 and n > 1:
        n_val = 1
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


def validate(model, examples: list[Example], K: int, seed: int) -> float:
    from hlsf.infer import min_ade, predict_examples

    if not examples:
        return math.nan
    preds = predict_examples(model, examples, K, "multi", seed)
    return min_ade(preds, examples)


def fit(scenes, model_cfg: ModelConfig, train_cfg: TrainConfig, recipe: str = "M5",
        out_dir=None, resume: bool = False, log=None, examples=None) -> FitResult:
    """Train on ``scenes``; hold out a validation split and keep the best checkpoint."""
    if examples is None:
        scenes = list(scenes)
        if not scenes:
            raise InvalidInputError("empty training set")
        examples = build_examples(scenes, model_cfg)
    if not examples:
        raise InvalidInputError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else Path("run")
    ckpt_dir = out_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_path, last_path = ckpt_dir / "best.ckpt", ckpt_dir / "last.ckpt"
    metrics_path = out_dir / "metrics.csv"

    tr_idx, va_idx = split_train_val(len(examples), train_cfg.val_fraction, train_cfg.seed)
    train_ex = [examples[i] for i in tr_idx]
    val_ex = [examples[i] for i in va_idx]
    if not train_ex:
        raise InvalidInputError("validation split left no training examples")

    trainer = Trainer(model_cfg, train_cfg, recipe)
    bs = train_cfg.batch_size
    per_epoch = math.ceil(len(train_ex) / bs)
    trainer.state.total_steps = per_epoch * train_cfg.epochs
    rows = []
    if resume and last_path.exists():
        trainer.load(last_path)
        with open(metrics_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= trainer.state.step]
    state = trainer.state

    def write_metrics():
        buf = io.StringIO()
        w = csv.DictWriter(buf, METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        metrics_path.write_text(buf.getvalue(), encoding="utf-8")

    while state.epoch < train_cfg.epochs:
        order = np.random.default_rng([int(train_cfg.seed), state.epoch]).permutation(len(train_ex))
        start = state.step - state.epoch * per_epoch
        for k in range(start, per_epoch):
            batch = collate([train_ex[i] for i in order[k * bs:(k + 1) * bs]])
            bd = trainer.train_step(batch)
            rows.append({"step": state.step, "recon": _fmt(bd.recon), "kl": _fmt(bd.kl),
                         "bce": _fmt(bd.bce), "gan_g": _fmt(bd.gan_g), "gan_d": _fmt(bd.gan_d),
                         "beta": _fmt(bd.beta), "val_minade": ""})
        state.epoch += 1
        if state.epoch % train_cfg.val_every == 0 or state.epoch == train_cfg.epochs:
            val = validate(trainer.model, val_ex, train_cfg.val_k, train_cfg.seed)
            rows[-1]["val_minade"] = _fmt(val)
            if log:
                log(f"epoch {state.epoch} step {state.step} recon {bd.recon:.4f} "
                    f"kl {bd.kl:.4f} bce {bd.bce:.4f} val_minade {val:.4f}")
            if not math.isnan(val) and val < state.best or not best_path.exists():
                if not math.isnan(val):
                    state.best = min(state.best, val)
                trainer.save(best_path)
        trainer.save(last_path)
        write_metrics()
    write_metrics()
    return FitResult(best_path, last_path, state.best, metrics_path, trainer)
