"""Two-stage training, constrained-token prediction and checkpoint I/O for the toy model."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..prompt import dequantize
from .data import collate
from .model import ToyModel, answer_logits, answer_loss
from .settings import ToyDims, TrainConfig, _parse_value  # noqa: F401
from .tokenizer import BOS, PAD

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, total: int, base: float, warmup: float) -> float:
    """Linear warmup over the first ``warmup`` fraction, cosine decay after."""
    w = int(math.ceil(warmup * total))
    if step < w:
        return base * (step + 1) / w
    span = max(total - w, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * (step - w) / span))


def trainable_parameters(model: ToyModel, stage: int, freeze_view_emb: bool = False) -> dict:
    """Named parameters updated in ``stage``.

    Stage 0 is base pretraining of the language model on text. Stage 1 aligns
    the projector only. Stage 2 trains the adapters, projector, image encoder
    and view table; base weights of the LM and point encoder stay frozen.
    """
    out = {}
    for name, p in model.named_parameters():
        if stage == 0:
            keep = name.startswith("lm.") and "lora_" not in name
        elif stage == 1:
            keep = name.startswith("projector.")
        elif stage == 2:
            keep = (name.startswith(("projector.", "image_encoder.")) or "lora_" in name
                    or (name == "view_emb" and not freeze_view_emb))
        else:
            raise ValueError(f"unknown stage {stage}")
        if keep:
            out[name] = p
    return out


def _fit(model, params: dict, n_items: int, make_loss, config: TrainConfig, stop=None) -> list:
    """Shared optimisation loop; ``make_loss(indices)`` returns a scalar loss.

    ``stop(epoch, curve)``, if given, runs after every epoch in eval mode and
    ends training early by returning True.
    """
    torch.manual_seed(config.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    plist = list(params.values())
    for p in plist:
        p.requires_grad_(True)
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(plist, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    elif config.optimizer == "adam":
        opt = torch.optim.Adam(plist, lr=config.lr, weight_decay=config.weight_decay)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, n_items)
    total = config.epochs * math.ceil(n_items / bs)
    curve = []
    step = 0
    model.train()
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n_items)
            losses = []
            for b0 in range(0, n_items, bs):
                lr = lr_at(step, total, config.lr, config.warmup)
                for g in opt.param_groups:
                    g["lr"] = lr
                loss = make_loss(order[b0:b0 + bs])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss {loss.item()} at epoch {epoch}, step {step}, lr {lr:.3g}; "
                        f"previous epoch mean {curve[-1] if curve else 'n/a'}"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if config.clip > 0:
                    torch.nn.utils.clip_grad_norm_(plist, config.clip)
                opt.step()
                losses.append(loss.item())
                step += 1
            curve.append(float(np.mean(losses)))
            if stop is not None:
                model.eval()
                with torch.no_grad():
                    done = stop(epoch, curve)
                model.train()
                if done:
                    break
    finally:
        model.eval()
        for p in model.parameters():
            p.requires_grad_(True)
    return curve


def train(model: ToyModel, dataset: list, stage: int, config: TrainConfig = TrainConfig(),
          loss_csv=None, stop=None) -> list:
    """Train stage 1 or 2 in place; returns the per-epoch mean loss curve.

    The loss is cross-entropy on the answer tokens only.
    """
    if stage not in (1, 2):
        raise ValueError("train() runs stage 1 or 2; use pretrain_base for stage 0")
    if not dataset:
        raise ValueError("empty dataset")
    if config.freeze_view_emb:
        with torch.no_grad():
            model.view_emb.zero_()
    params = trainable_parameters(model, stage, config.freeze_view_emb)
    dtype = next(model.parameters()).dtype

    def make_loss(idx):
        batch = collate([dataset[i] for i in idx], model.tokenizer, config.pooled, dtype)
        logits, seq = model(batch)
        return answer_loss(logits, seq, batch.answers)

    curve = _fit(model, params, len(dataset), make_loss, config, stop)
    if loss_csv is not None:
        write_loss_csv(loss_csv, curve)
    return curve


def pretrain_base(model: ToyModel, texts: list, config: TrainConfig = TrainConfig(), loss_csv=None) -> list:
    """Stage 0: next-token pretraining of the language model on plain text.

    Stands in for the pretrained LLM; no image or point tokens are involved.
    """
    if not texts:
        raise ValueError("empty corpus")
    tok = model.tokenizer
    seqs = [[BOS] + tok.encode(t) for t in texts]
    params = trainable_parameters(model, 0)

    def make_loss(idx):
        ids = pad_ids([seqs[i] for i in idx])
        logits = model.text_logits(ids)
        return F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1),
                               ignore_index=PAD)

    curve = _fit(model, params, len(seqs), make_loss, config)
    if loss_csv is not None:
        write_loss_csv(loss_csv, curve)
    return curve


def pad_ids(seqs) -> torch.Tensor:
    out = torch.full((len(seqs), max(len(s) for s in seqs)), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s)
    return out


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


# --------------------------------------------------------------------------
# prediction

def _batches(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


@torch.no_grad()
def answer_accuracy(model: ToyModel, dataset: list, pooled: bool = False, batch_size: int = 64) -> float:
    """Fraction of samples whose every answer token is the argmax (teacher forced)."""
    dtype = next(model.parameters()).dtype
    hits = 0
    for chunk in _batches(dataset, batch_size):
        batch = collate(chunk, model.tokenizer, pooled, dtype)
        logits, seq = model(batch)
        pred = answer_logits(logits, seq).argmax(-1)
        ok = (pred == batch.answers) | (batch.answers == 0)
        hits += int(ok.all(dim=1).sum())
    return hits / len(dataset)


def level_probs(model: ToyModel, samples: list, pooled: bool = False) -> np.ndarray:
    """Renormalized distribution over the 5 level tokens at the level slot."""
    tok = model.tokenizer
    stub = [type(s)(s.patches, s.views, s.prompt, "the quality of the point cloud is", s.labels)
            for s in samples]
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        batch = collate(stub, tok, pooled, dtype)
        logits, seq = model(batch)
    last = logits[:, seq.answer_start + seq.n_answer - 1]
    return torch.softmax(last[:, tok.level_ids].double(), dim=-1).numpy()


def predict_score(model: ToyModel, sample, pooled: bool = False) -> float:
    return dequantize(level_probs(model, [sample], pooled)[0])


@torch.no_grad()
def predict_localization_batch(model: ToyModel, samples: list, pooled: bool = True):
    """(octants, dtypes) by constrained argmax; the type slot sees the predicted octant."""
    from ..distort import DISTORTION_TYPES

    tok = model.tokenizer
    dtype = next(model.parameters()).dtype
    stub = [type(s)(s.patches, s.views, s.prompt, "octant0", s.labels) for s in samples]
    batch = collate(stub, tok, pooled, dtype)
    logits, seq = model(batch)
    oct_ids = torch.tensor(tok.octant_ids)
    octs = logits[:, seq.answer_start - 1, oct_ids].argmax(-1)
    batch.answers = oct_ids[octs][:, None]
    logits, seq = model(batch)
    types = logits[:, seq.answer_start, torch.tensor(tok.type_ids)].argmax(-1)
    return octs.tolist(), [DISTORTION_TYPES[i] for i in types.tolist()]


def predict_localization(model: ToyModel, sample, pooled: bool = True):
    o, t = predict_localization_batch(model, [sample], pooled)
    return o[0], t[0]


def localization_accuracy(model: ToyModel, samples: list, pooled: bool = True, batch_size: int = 64):
    """(identification accuracy, localization accuracy)."""
    ident = loc = 0
    for chunk in _batches(samples, batch_size):
        octs, types = predict_localization_batch(model, chunk, pooled)
        for s, o, t in zip(chunk, octs, types):
            loc += int(o == s.labels["octant"])
            ident += int(t == s.labels["dtype"])
    return ident / len(samples), loc / len(samples)


# --------------------------------------------------------------------------
# checkpoints: <u8 header length> <JSON header> <float32 tensors>

def save_checkpoint(model: ToyModel, path, stage: int, extra: dict | None = None) -> None:
    state = model.state_dict()
    entries = []
    offset = 0
    blobs = []
    for name, t in state.items():
        a = t.detach().cpu().to(torch.float32).contiguous().numpy()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.astype("<f4").tobytes())
        offset += a.size * 4
    header = {"dims": model.dims.to_dict(), "seed": model.seed, "stage": stage, "tensors": entries,
              **(extra or {})}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns ``(model, header)``."""
    data = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", data, 0)
    header = json.loads(data[8:8 + hlen])
    body = memoryview(data)[8 + hlen:]
    model = ToyModel(ToyDims(**header["dims"]), header["seed"])
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(a.copy())
    model.load_state_dict(state)
    return model, header
