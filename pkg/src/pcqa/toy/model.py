"""Desk-scale point/image/text fusion model with low-rank adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .settings import FULL_SCALE, ToyDims  # noqa: F401
from .tokenizer import BOS, P_END_ID, P_START_ID, PAD, Tokenizer

TEXT, IMAGE, POINT, SPECIAL = 0, 1, 2, 3
N_VIEWS = 6
N_CELL_STATS = 8
N_CELL_FEATURES = 2 * N_CELL_STATS + 2  # stats, their contrast, the cell's (row, col)

class LoRALinear(nn.Module):
    """Affine layer with a low-rank delta: W_eff = W + (alpha / r) A B.

    A is (out, r) and B is (r, in); B starts at zero so the adapter is a no-op
    until trained.
    """

    def __init__(self, fan_in: int, fan_out: int, rank: int, alpha: float):
        super().__init__()
        self.base = nn.Linear(fan_in, fan_out)
        self.lora_a = nn.Parameter(torch.randn(fan_out, rank) / math.sqrt(rank))
        self.lora_b = nn.Parameter(torch.zeros(rank, fan_in))
        self.scale = alpha / rank
        self.adapter = True

    def forward(self, x):
        y = self.base(x)
        if self.adapter:
            y = y + self.scale * ((x @ self.lora_b.T) @ self.lora_a.T)
        return y

    def effective_weight(self):
        return self.base.weight + self.scale * self.lora_a @ self.lora_b


# --------------------------------------------------------------------------
# point branch

REL_GAIN = 4.0  # patch radius is ~0.25 of the unit ball; bring offsets to O(1)


class PointEncoder(nn.Module):
    """Per-point MLP, then one max-pooled and m-1 query-pooled features per patch."""

    def __init__(self, dims: ToyDims):
        super().__init__()
        c = dims.c
        self.dims = dims
        self.fc1 = nn.Linear(9, c)
        self.fc2 = nn.Linear(c, c)
        self.queries = nn.Parameter(torch.randn(dims.m - 1, c))
        self.q = LoRALinear(c, c, dims.rank, dims.alpha)
        self.k = nn.Linear(c, c)
        self.v = LoRALinear(c, c, dims.rank, dims.alpha)

    def forward(self, patches):
        if patches.ndim < 3 or patches.shape[-1] != self.dims.d:
            raise ValueError(f"expected (..., s, n, 6) patches, got {tuple(patches.shape)}")
        xyz = patches[..., :3]
        rel = (xyz - xyz.mean(dim=-2, keepdim=True)) * REL_GAIN
        x = torch.cat([rel, xyz, 2.0 * patches[..., 3:] - 1.0], dim=-1)
        h = F.gelu(self.fc2(F.gelu(self.fc1(x))))
        f_max = h.amax(dim=-2, keepdim=True)
        q = self.q(self.queries)
        k = self.k(h)
        v = self.v(h)
        att = torch.softmax(k @ q.T / math.sqrt(q.shape[-1]), dim=-2)  # over points
        pooled = att.transpose(-1, -2) @ v
        return torch.cat([f_max, pooled], dim=-2)


class Projector(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.l1 = nn.Linear(c_in, c_out)
        self.l2 = nn.Linear(c_out, c_out)
        self.l3 = nn.Linear(c_out, c_out)

    def forward(self, x):
        return self.l3(F.gelu(self.l2(F.gelu(self.l1(x)))))


# --------------------------------------------------------------------------
# image branch

# fixed gains that bring each statistic to O(1) spread on typical renders
_STAT_GAIN = (2.0, 2.0, 2.0, 8.0, 8.0, 8.0, 20.0, 2.0)


def cell_stats(views, t: int):
    """Summary statistics of each grid cell of each view.

    ``views`` is (..., 6, H, W, 4): RGB in [0, 1] plus a coverage flag.
    Returns (..., 6, t, 8), taken over covered pixels: mean RGB, RGB std,
    mean absolute gray difference between covered neighbours, and the
    covered fraction. Values are centred and scaled by fixed gains.
    """
    g = math.isqrt(t)
    *lead, v, h, w, ch = views.shape
    cells = views.reshape(*lead, v, g, h // g, g, w // g, ch).movedim(-4, -3)
    cells = cells.reshape(*lead, v, t, h // g, w // g, ch)
    rgb = cells[..., :3]
    cov = cells[..., 3]
    n = cov.sum(dim=(-2, -1)).clamp(min=1.0)[..., None]
    mean = (rgb * cov[..., None]).sum(dim=(-3, -2)) / n
    var = ((rgb - mean[..., None, None, :]).square() * cov[..., None]).sum(dim=(-3, -2)) / n
    std = (var + 1e-12).sqrt()
    gray = rgb.mean(dim=-1)
    pv = cov[..., 1:, :] * cov[..., :-1, :]
    ph = cov[..., :, 1:] * cov[..., :, :-1]
    diff = ((gray[..., 1:, :] - gray[..., :-1, :]).abs() * pv).sum(dim=(-2, -1)) \
        + ((gray[..., :, 1:] - gray[..., :, :-1]).abs() * ph).sum(dim=(-2, -1))
    hf = diff / (pv.sum(dim=(-2, -1)) + ph.sum(dim=(-2, -1))).clamp(min=1.0)
    cover = cov.mean(dim=(-2, -1))
    raw = torch.cat([mean - 0.5, std, hf[..., None], cover[..., None] - 0.5], dim=-1)
    return raw * raw.new_tensor(_STAT_GAIN)


class ImageEncoder(nn.Module):
    def __init__(self, dims: ToyDims):
        super().__init__()
        self.dims = dims
        self.proj = nn.Linear(N_CELL_FEATURES, dims.c_tok)
        g = math.isqrt(dims.t)
        rc = torch.stack(torch.meshgrid(torch.arange(g), torch.arange(g), indexing="ij"), -1).reshape(-1, 2)
        self.register_buffer("cell_pos", (rc.to(torch.float32) + 0.5) / g - 0.5, persistent=False)

    def forward(self, views):
        d = self.dims
        if views.ndim < 4 or tuple(views.shape[-4:]) != (N_VIEWS, d.image_size, d.image_size, 4):
            raise ValueError(f"expected (..., 6, {d.image_size}, {d.image_size}, 4) views, "
                             f"got {tuple(views.shape)}")
        st = cell_stats(views, d.t)
        # contrast against the average cell of the same sample
        rel = st - st.mean(dim=(-3, -2), keepdim=True)
        pos = self.cell_pos.to(st.dtype).expand(*st.shape[:-1], 2)
        return self.proj(torch.cat([st, rel, pos], dim=-1))

    def position_term(self):
        """The part of each cell token contributed by its grid position: (t, c')."""
        return self.cell_pos.to(self.proj.weight.dtype) @ self.proj.weight[:, 2 * N_CELL_STATS:].T


# --------------------------------------------------------------------------
# language model

class Block(nn.Module):
    def __init__(self, dims: ToyDims):
        super().__init__()
        c = dims.c_tok
        self.heads = dims.heads
        self.ln1 = nn.LayerNorm(c)
        self.q = LoRALinear(c, c, dims.rank, dims.alpha)
        self.k = nn.Linear(c, c)
        self.v = LoRALinear(c, c, dims.rank, dims.alpha)
        self.o = nn.Linear(c, c)
        self.ln2 = nn.LayerNorm(c)
        self.fc1 = nn.Linear(c, dims.mlp_ratio * c)
        self.fc2 = nn.Linear(dims.mlp_ratio * c, c)

    def forward(self, x, mask):
        b, n, c = x.shape
        hd = c // self.heads
        h = self.ln1(x)

        def split(z):
            return z.view(b, n, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd) + mask
        att = torch.softmax(scores, dim=-1) @ v
        x = x + self.o(att.transpose(1, 2).reshape(b, n, c))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyLM(nn.Module):
    def __init__(self, dims: ToyDims):
        super().__init__()
        c = dims.c_tok
        self.dims = dims
        self.tok_emb = nn.Embedding(dims.vocab, c)
        self.pos_emb = nn.Embedding(dims.context, c)
        self.seg_emb = nn.Embedding(4, c)
        self.blocks = nn.ModuleList(Block(dims) for _ in range(dims.layers))
        self.ln_f = nn.LayerNorm(c)
        self.head = nn.Linear(c, dims.vocab, bias=False)
        # unit-norm token vectors so no single embedding dominates the residual stream
        for e in (self.tok_emb, self.pos_emb, self.seg_emb):
            nn.init.normal_(e.weight, std=c ** -0.5)

    def forward(self, emb, tags, text_pos):
        """Logits for a batch of assembled sequences.

        ``emb`` is (B, n, c'); ``tags`` (n,) segment ids; ``text_pos`` (n,)
        holds each text token's index among the text tokens and -1 elsewhere.
        """
        n = emb.shape[1]
        if n > self.dims.context:
            raise ValueError(f"sequence of {n} tokens exceeds the context of {self.dims.context}")
        x = emb + self.seg_emb(tags)
        is_text = text_pos >= 0
        pos = self.pos_emb(text_pos.clamp(min=0)) * is_text[:, None].to(emb.dtype)
        x = x + pos
        mask = torch.full((n, n), float("-inf"), dtype=emb.dtype, device=emb.device).triu(1)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.ln_f(x))


# --------------------------------------------------------------------------
# assembled model

@dataclass
class TokenSequence:
    embeddings: torch.Tensor  # (B, n', c')
    tags: torch.Tensor  # (n',)
    view_ids: torch.Tensor  # (n',) view of each image token, -1 elsewhere
    text_pos: torch.Tensor  # (n',)
    answer_start: int  # index of the first answer token
    n_answer: int

    def __len__(self):
        return self.embeddings.shape[1]


class ToyModel(nn.Module):
    def __init__(self, dims: ToyDims = ToyDims(), seed: int = 0):
        super().__init__()
        self.dims = dims
        self.seed = seed
        self.tokenizer = Tokenizer(dims.vocab)
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=g)))
            self.point_encoder = PointEncoder(dims)
            self.projector = Projector(dims.c, dims.c_tok)
            self.image_encoder = ImageEncoder(dims)
            self.view_emb = nn.Parameter(torch.randn(N_VIEWS, dims.c_tok) * dims.c_tok ** -0.5)
            self.lm = ToyLM(dims)

    # -- components --------------------------------------------------------
    def encode_points(self, patches):
        return self.point_encoder(patches)

    def project_points(self, x):
        """(..., s, m, c) -> flattened (..., s*m, c') point tokens, patch-major."""
        y = self.projector(x)
        return y.reshape(*y.shape[:-3], y.shape[-3] * y.shape[-2], y.shape[-1])

    def pool_patch_features(self, x):
        """Mean over the m features of each patch, then project: (..., s, c')."""
        return self.projector(x.mean(dim=-2))

    def encode_images(self, views):
        return self.image_encoder(views)

    def add_view_embeddings(self, tokens):
        """Add the per-view vector to every token of that view; (..., 6, t, c')."""
        return tokens + self.view_emb[:, None, :]

    def adapters(self):
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def set_adapters(self, enabled: bool):
        for m in self.adapters():
            m.adapter = enabled

    # -- sequence assembly -------------------------------------------------
    def assemble_sequence(self, prefix, point_tokens, suffix, answer, image_tokens=None) -> TokenSequence:
        """Build ``[bos prefix] [images] <p_start> [points] <p_end> [suffix] [answer]``.

        ``prefix``/``suffix`` are token id lists shared by the batch;
        ``answer`` is (B, A) ids; ``point_tokens`` is (B, k, c') and
        ``image_tokens`` (B, 6, t, c') with view embeddings already added.
        """
        if point_tokens.shape[1] == 0:
            raise ValueError("the point segment may not be empty")
        emb = self.lm.tok_emb
        b = point_tokens.shape[0]
        dev = point_tokens.device

        def text(ids):
            ids = torch.as_tensor(ids, dtype=torch.long, device=dev)
            if ids.ndim == 1:
                ids = ids.expand(b, -1)
            return emb(ids)

        parts = [(text([BOS] + list(prefix)), TEXT, None)]
        if image_tokens is not None:
            v, t = image_tokens.shape[1:3]
            vid = torch.arange(v, device=dev).repeat_interleave(t)
            parts.append((image_tokens.reshape(b, v * t, -1), IMAGE, vid))
        parts += [
            (text([P_START_ID]), SPECIAL, None),
            (point_tokens, POINT, None),
            (text([P_END_ID]), SPECIAL, None),
            (text(list(suffix)), TEXT, None),
        ]
        answer_start = sum(p[0].shape[1] for p in parts)
        parts.append((text(answer), TEXT, None))
        n = answer_start + answer.shape[1]
        if n > self.dims.context:
            raise ValueError(f"sequence of {n} tokens exceeds the context of {self.dims.context}")
        tags = torch.cat([torch.full((p[0].shape[1],), p[1], dtype=torch.long) for p in parts])
        view_ids = torch.cat([
            p[2] if p[2] is not None else torch.full((p[0].shape[1],), -1, dtype=torch.long) for p in parts
        ])
        # text tokens are numbered among themselves, so the text stream sees the
        # same positions with or without the image/point segments
        is_text = tags == TEXT
        text_pos = torch.where(is_text, torch.cumsum(is_text.long(), 0) - 1, torch.full_like(tags, -1))
        return TokenSequence(torch.cat([p[0] for p in parts], dim=1), tags.to(dev), view_ids.to(dev),
                             text_pos.to(dev), answer_start, answer.shape[1])

    def lm_forward(self, seq: TokenSequence):
        return self.lm(seq.embeddings, seq.tags, seq.text_pos)

    # -- full pass ---------------------------------------------------------
    def sequence(self, batch, pooled: Optional[bool] = None) -> TokenSequence:
        pooled = batch.pooled if pooled is None else pooled
        x = self.encode_points(batch.patches)
        pts = self.pool_patch_features(x) if pooled else self.project_points(x)
        img = None
        if batch.views is not None:
            img = self.add_view_embeddings(self.encode_images(batch.views))
        return self.assemble_sequence(batch.prefix, pts, batch.suffix, batch.answers, img)

    def text_logits(self, ids):
        """Plain text through the LM: (B, n) ids -> (B, n, V) logits."""
        n = ids.shape[1]
        return self.lm(self.lm.tok_emb(ids), torch.zeros(n, dtype=torch.long, device=ids.device),
                       torch.arange(n, device=ids.device))

    def forward(self, batch):
        seq = self.sequence(batch)
        return self.lm_forward(seq), seq


def answer_logits(logits, seq: TokenSequence):
    """Logits predicting each answer token: (B, A, V)."""
    s = seq.answer_start
    return logits[:, s - 1: s - 1 + seq.n_answer]


def answer_loss(logits, seq: TokenSequence, answers):
    """Mean cross-entropy over non-pad answer tokens."""
    al = answer_logits(logits, seq)
    return F.cross_entropy(al.reshape(-1, al.shape[-1]), answers.reshape(-1), ignore_index=PAD)
