"""Learnable networks: encoders, lane-level context, mode selection, CVAE heads,
decoder and lane-shape discriminator.

Batched tensors follow ``features.collate``; agent index 0 is always the
target.  The module-level functions at the bottom are single-example views of
the same computations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from hlsf.config import ModelConfig
from hlsf.errors import InvalidInputError, ShapeError

SIGMA_FLOOR = 1e-4


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class ModeWeights:
    logits: torch.Tensor
    weights: torch.Tensor


@dataclass
class SceneEncoding:
    hist_enc: torch.Tensor   # (B, A, history_hidden)
    lane_enc: torch.Tensor   # (B, M, lane_hidden)
    alpha: torch.Tensor      # (B, M, M) hierarchical, (B, M) baseline
    context: torch.Tensor    # (B, M, C) hierarchical, (B, 1, C) baseline


def _set_forget_bias(lstm, value=1.0):
    for name, p in lstm.named_parameters():
        if name.startswith("bias"):
            h = p.shape[0] // 4
            with torch.no_grad():
                p[h: 2 * h] = value if name.startswith("bias_ih") else 0.0


class SequenceEncoder(nn.Module):
    """Per-row linear embedding + ReLU, then an LSTM; returns the last hidden state."""

    def __init__(self, in_width, embed, hidden):
        super().__init__()
        self.in_width = in_width
        self.embed = nn.Linear(in_width, embed)
        self.lstm = nn.LSTM(embed, hidden, batch_first=True)
        _set_forget_bias(self.lstm)

    def forward(self, rows):
        if rows.shape[-1] != self.in_width:
            raise ShapeError(f"expected rows of width {self.in_width}, got {rows.shape[-1]}")
        lead = rows.shape[:-2]
        x = F.relu(self.embed(rows.reshape(-1, *rows.shape[-2:])))
        _, (h, _) = self.lstm(x)
        return h[-1].reshape(*lead, -1)


class GaussianHead(nn.Module):
    """Two two-layer MLPs giving a mean and a positive standard deviation."""

    def __init__(self, in_width, hidden, out):
        super().__init__()
        self.in_width = in_width
        self.mu = nn.Sequential(nn.Linear(in_width, hidden), nn.ReLU(), nn.Linear(hidden, out))
        self.sigma = nn.Sequential(nn.Linear(in_width, hidden), nn.ReLU(), nn.Linear(hidden, out))

    def forward(self, x):
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"expected input width {self.in_width}, got {x.shape[-1]}")
        return self.mu(x), F.softplus(self.sigma(x)) + SIGMA_FLOOR


class LaneAttention(nn.Module):
    """Additive attention scores ``v . tanh(W1 x + W2 l)`` of lanes given the history."""

    def __init__(self, hist_width, lane_width, hidden):
        super().__init__()
        self.w_hist = nn.Linear(hist_width, hidden, bias=False)
        self.w_lane = nn.Linear(lane_width, hidden)
        self.v = nn.Linear(hidden, 1, bias=False)

    def forward(self, x, lanes):
        return self.v(torch.tanh(self.w_hist(x).unsqueeze(-2) + self.w_lane(lanes))).squeeze(-1)


class InteractionGNN(nn.Module):
    def __init__(self, node_width, message_width):
        super().__init__()
        self.message = nn.Linear(2 + 2 * node_width, message_width)
        self.update = nn.GRUCell(message_width, node_width)

    def forward(self, h0, pos, members, rounds=1):
        """Context summed over non-target members after ``rounds`` of message passing.

        h0: (..., A, W) node states; pos: (..., A, 2); members: (..., A) bool
        with index 0 the target.
        """
        A = h0.shape[-2]
        h = h0
        eye = torch.eye(A, dtype=torch.bool, device=h0.device)
        pair = members.unsqueeze(-1) & members.unsqueeze(-2) & ~eye  # receiver i, sender j
        rel = pos.unsqueeze(-3) - pos.unsqueeze(-2)                   # p_j - p_i at [.., i, j]
        rel = rel.expand(*pair.shape, 2)
        for _ in range(rounds):
            hi = h.unsqueeze(-2).expand(*pair.shape, h.shape[-1])
            hj = h.unsqueeze(-3).expand(*pair.shape, h.shape[-1])
            msg = F.relu(self.message(torch.cat([rel, hi, hj], dim=-1)))
            incoming = (msg * pair.unsqueeze(-1).to(msg.dtype)).sum(dim=-2)
            flat = self.update(incoming.reshape(-1, incoming.shape[-1]), h.reshape(-1, h.shape[-1]))
            h_new = flat.reshape(h.shape)
            h = torch.where(members.unsqueeze(-1), h_new, h)
        others = members.clone()
        others[..., 0] = False
        return (h * others.unsqueeze(-1).to(h.dtype)).sum(dim=-2)


class ModeSelector(nn.Module):
    def __init__(self, context_width, embed, num_modes):
        super().__init__()
        self.context_width = context_width
        self.num_modes = num_modes
        self.embed = nn.Linear(context_width, embed)
        self.out = nn.Linear(num_modes * embed, num_modes)

    def forward(self, contexts):
        if contexts.shape[-2:] != (self.num_modes, self.context_width):
            raise ShapeError(f"expected {self.num_modes} contexts of width {self.context_width}, "
                             f"got {tuple(contexts.shape[-2:])}")
        e = F.relu(self.embed(contexts))
        return self.out(e.flatten(-2))


class TrajectoryDecoder(nn.Module):
    """Autoregressive LSTM decoder.

    Positions enter and leave the network divided by ``scale``.  In
    ``absolute`` mode the output layer gives the next position directly; in
    ``residual`` mode it gives the step from the previous one.
    """

    def __init__(self, context_width, latent, embed, hidden, horizon, output="absolute",
                 scale=1.0):
        super().__init__()
        self.horizon = horizon
        self.hidden = hidden
        self.residual = output == "residual"
        self.scale = float(scale)
        self.embed = nn.Linear(2, embed)
        self.cell = nn.LSTMCell(embed + context_width + latent, hidden)
        self.out = nn.Linear(hidden, 2)
        with torch.no_grad():
            self.cell.bias_ih[hidden: 2 * hidden] = 1.0
            self.cell.bias_hh[hidden: 2 * hidden] = 0.0

    def forward(self, context, z, start):
        n = context.shape[0]
        h = context.new_zeros(n, self.hidden)
        c = context.new_zeros(n, self.hidden)
        p = start
        cz = torch.cat([context, z], dim=-1)
        out = []
        for _ in range(self.horizon):
            e = F.relu(self.embed(p / self.scale))
            h, c = self.cell(torch.cat([e, cz], dim=-1), (h, c))
            step = self.out(h) * self.scale
            p = p + step if self.residual else step
            out.append(p)
        return torch.stack(out, dim=-2)


def lane_offsets(traj, lane_points):
    """Offset of each position from its nearest lane point (lowest index on ties)."""
    d = torch.cdist(traj.detach(), lane_points.detach())
    idx = d.argmin(dim=-1)
    nearest = torch.gather(lane_points, -2, idx.unsqueeze(-1).expand(*idx.shape, 2))
    return traj - nearest


class Discriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = SequenceEncoder(4, cfg.disc_embed, cfg.disc_hidden)
        self.head = nn.Linear(cfg.disc_hidden + cfg.lane_hidden, 1)

    def forward(self, traj, lane_points, lane_enc):
        rows = torch.cat([traj, lane_offsets(traj, lane_points)], dim=-1)
        y = self.encoder(rows)
        return self.head(torch.cat([y, lane_enc], dim=-1)).squeeze(-1)


class HLSForecaster(nn.Module):
    """Encoders, scene context, mode selection, posterior/prior and decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.context_width
        self.history_encoder = SequenceEncoder(cfg.row_width, cfg.history_embed, cfg.history_hidden)
        self.future_encoder = SequenceEncoder(cfg.row_width, cfg.history_embed, cfg.history_hidden)
        self.lane_encoder = SequenceEncoder(5, cfg.lane_embed, cfg.lane_hidden)
        if cfg.vli or not cfg.hierarchical:
            self.attention = LaneAttention(cfg.history_hidden, cfg.lane_hidden, cfg.attn_hidden)
        if cfg.v2i:
            self.interaction = InteractionGNN(cfg.node_hidden, cfg.message)
        if cfg.hierarchical:
            self.mode_selector = ModeSelector(C, cfg.mode_embed, cfg.M)
        self.posterior = GaussianHead(cfg.history_hidden + C, cfg.head_hidden, cfg.D)
        self.prior = GaussianHead(C, cfg.head_hidden, cfg.D)
        self.decoder = TrajectoryDecoder(C, cfg.D, cfg.decoder_embed, cfg.decoder_hidden, cfg.T,
                                         cfg.decoder_output, cfg.position_scale)

    # -- scene context ------------------------------------------------------

    def vli(self, x_target, lane_enc, lane_valid=None):
        """(a, alpha) for every reference lane: alpha[b, m, l] is zero at l == m."""
        M = lane_enc.shape[-2]
        scores = self.attention(x_target, lane_enc)                      # (B, M)
        allowed = ~torch.eye(M, dtype=torch.bool, device=lane_enc.device)
        allowed = allowed.expand(*scores.shape[:-1], M, M)
        if self.cfg.mask_fake and lane_valid is not None:
            allowed = allowed & lane_valid.unsqueeze(-2)
        s = scores.unsqueeze(-2).expand_as(allowed)
        s = s.masked_fill(~allowed, float("-inf"))
        any_allowed = allowed.any(dim=-1, keepdim=True)
        s = torch.where(any_allowed, s, torch.zeros_like(s))
        alpha = torch.softmax(s, dim=-1) * any_allowed.to(s.dtype)
        summary = alpha @ lane_enc
        return torch.cat([lane_enc, summary], dim=-1), alpha

    def encode(self, batch) -> SceneEncoding:
        cfg = self.cfg
        hist_enc = self.history_encoder(batch["hist"])
        lane_enc = self.lane_encoder(batch["lanes"])
        x = hist_enc[:, 0]
        B, M = lane_enc.shape[:2]
        if not cfg.hierarchical:
            scores = self.attention(x, lane_enc)
            if cfg.mask_fake:
                scores = scores.masked_fill(~batch["lane_valid"], float("-inf"))
            alpha = torch.softmax(scores, dim=-1)
            summary = (alpha.unsqueeze(-1) * lane_enc).sum(dim=-2)
            ctx = torch.cat([x, summary], dim=-1).unsqueeze(1)
            return SceneEncoding(hist_enc, lane_enc, alpha, ctx)
        parts = [x.unsqueeze(1).expand(B, M, x.shape[-1])]
        if cfg.vli:
            a, alpha = self.vli(x, lane_enc, batch.get("lane_valid"))
            parts.append(a)
        else:
            alpha = lane_enc.new_zeros(B, M, M)
            parts.append(lane_enc)
        if cfg.v2i:
            h0 = hist_enc.unsqueeze(1).expand(B, M, *hist_enc.shape[1:])
            pos = batch["pos"].unsqueeze(1).expand(B, M, *batch["pos"].shape[1:])
            members = batch["nbr"] & batch["agent_mask"].unsqueeze(1)
            parts.append(self.interaction(h0, pos, members, cfg.k_rounds))
        return SceneEncoding(hist_enc, lane_enc, alpha, torch.cat(parts, dim=-1))

    def mode_logits(self, context):
        return self.mode_selector(context)

    def encode_future(self, fut):
        return self.future_encoder(fut)

    def posterior_params(self, y_enc, context) -> GaussianLatent:
        return GaussianLatent(*self.posterior(torch.cat([y_enc, context], dim=-1)))

    def prior_params(self, context) -> GaussianLatent:
        return GaussianLatent(*self.prior(context))

    def decode(self, context, z, start):
        return self.decoder(context, z, start)


def build_model(cfg: ModelConfig) -> tuple[HLSForecaster, Discriminator | None]:
    """Construct networks with seed-controlled initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = HLSForecaster(cfg)
        disc = Discriminator(cfg) if cfg.gan else None
    return model, disc


# ---------------------------------------------------------------------------
# single-example operations
# ---------------------------------------------------------------------------


def _t(x, like=None):
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.get_default_dtype()
    return torch.as_tensor(x, dtype=dtype)


def encode_sequence(rows, kind: str, model: HLSForecaster):
    """Final hidden state for one sequence; ``kind`` is history, future or lane."""
    enc = {"history": model.history_encoder, "future": model.future_encoder,
           "lane": model.lane_encoder}.get(kind)
    if enc is None:
        raise InvalidInputError(f"unknown sequence kind {kind!r}")
    rows = _t(rows, enc.embed.weight)
    if rows.ndim != 2:
        raise ShapeError("rows must be (length, width)")
    return enc(rows.unsqueeze(0))[0]


def vli_context(x_enc, lane_encs, m: int, model: HLSForecaster):
    """(a, alpha) for reference lane ``m``; alpha has length M with alpha[m] = 0."""
    M = lane_encs.shape[0]
    if not 0 <= m < M:
        raise InvalidInputError(f"reference index {m} out of range for {M} lanes")
    a, alpha = model.vli(x_enc.unsqueeze(0), lane_encs.unsqueeze(0))
    return a[0, m], alpha[0, m]


def v2i_context(encodings, positions, members, model: HLSForecaster, target: int = 0):
    """Interaction context for ``target`` given agent encodings and member indices."""
    encodings = _t(encodings, model.interaction.message.weight)
    positions = _t(positions, encodings)
    members = sorted(set(int(i) for i in members))
    if target not in members:
        raise InvalidInputError("target must belong to its own neighborhood")
    order = [target] + [i for i in members if i != target]
    mask = torch.ones(len(order), dtype=torch.bool)
    return model.interaction(encodings[order], positions[order], mask, model.cfg.k_rounds)


def assemble_context(x_enc, a, b, cfg: ModelConfig):
    parts = [x_enc]
    expected_a = 2 * cfg.lane_hidden if cfg.vli else cfg.lane_hidden
    if a.shape[-1] != expected_a:
        raise ShapeError(f"lane part must have width {expected_a}, got {a.shape[-1]}")
    parts.append(a)
    if cfg.v2i:
        if b is None or b.shape[-1] != cfg.node_hidden:
            raise ShapeError(f"interaction part must have width {cfg.node_hidden}")
        parts.append(b)
    c = torch.cat(parts, dim=-1)
    if c.shape[-1] != cfg.context_width:
        raise ShapeError(f"context width {c.shape[-1]} != {cfg.context_width}")
    return c


def mode_weights(contexts, model: HLSForecaster) -> ModeWeights:
    logits = model.mode_logits(contexts)
    return ModeWeights(logits, torch.softmax(logits, dim=-1))


def posterior_params(y_enc, context, model: HLSForecaster) -> GaussianLatent:
    return model.posterior_params(y_enc, context)


def prior_params(context, model: HLSForecaster) -> GaussianLatent:
    return model.prior_params(context)


def sample_latent(g: GaussianLatent, eps):
    eps = _t(eps, g.mu)
    if eps.shape[-1] != g.mu.shape[-1]:
        raise ShapeError(f"noise width {eps.shape[-1]} != latent width {g.mu.shape[-1]}")
    return g.mu + g.sigma * eps


def decode_trajectory(context, z, start, model: HLSForecaster):
    start = _t(start, context)
    return model.decode(context.unsqueeze(0), z.unsqueeze(0), start.reshape(1, 2))[0]


def discriminator_score(traj, lane, disc: Discriminator, model: HLSForecaster):
    """Raw logit for one trajectory against one (non-fake) lane."""
    from hlsf.geom import ProcessedLane

    if isinstance(lane, ProcessedLane):
        if lane.is_fake:
            raise InvalidInputError("discriminator needs a real lane")
        rows = lane.rows
    else:
        rows = lane
    w = disc.head.weight
    rows = _t(rows, w)
    if not torch.any(rows != 0):
        raise InvalidInputError("discriminator needs a real lane")
    lane_rows = rows if model.cfg.pdp else torch.cat([rows[:, :2], torch.zeros_like(rows[:, 2:])], -1)
    lane_enc = model.lane_encoder(lane_rows.unsqueeze(0))
    return disc(_t(traj, w).unsqueeze(0), rows[:, :2].unsqueeze(0), lane_enc)[0]
