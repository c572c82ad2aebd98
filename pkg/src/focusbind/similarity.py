"""Whole-image / whole-caption similarity baseline.

A tiny contrastive dual encoder in the style of CLIP: a small CNN embeds the
image, the toy text encoder embeds the caption, and the cosine similarity is
the score. It sees the caption only as one pooled vector, which is what makes
it a weak judge of which attribute belongs to which object.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import TextEncoder
from .epvit import accuracy_from_scores, prepare_images
from .tokenizer import DEFAULT_TOKENIZER

log = logging.getLogger(__name__)


@dataclass
class SimilarityConfig:
    dim: int = 64
    text_depth: int = 1
    channels: int = 32


class SimilarityModel(nn.Module):
    def __init__(self, cfg: SimilarityConfig = None):
        super().__init__()
        self.cfg = cfg = cfg or SimilarityConfig()
        self.tokenizer = DEFAULT_TOKENIZER
        c = cfg.channels
        self.image = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.GELU(), nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 3, padding=1), nn.GELU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.GELU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2 * c, cfg.dim))
        self.text = TextEncoder(len(self.tokenizer), cfg.dim, cfg.text_depth)
        self.logit_scale = nn.Parameter(torch.tensor(np.log(10.0), dtype=torch.float32))

    def embed_images(self, images) -> torch.Tensor:
        return F.normalize(self.image(prepare_images(images)), dim=-1)

    def embed_texts(self, captions: Sequence[str]) -> torch.Tensor:
        toks = [self.tokenizer.tokenize(c).tokens for c in captions]
        L = max(len(t) for t in toks)
        ids = torch.full((len(toks), L), self.tokenizer.pad_id, dtype=torch.long)
        for i, t in enumerate(toks):
            ids[i, :len(t)] = torch.as_tensor(t)
        eos = torch.as_tensor([len(t) - 1 for t in toks])
        h = self.text(ids)[torch.arange(len(toks)), eos]
        return F.normalize(h, dim=-1)

    def save(self, directory):
        return save_checkpoint(directory, "similarity", asdict(self.cfg), self.state_dict())

    @classmethod
    def load(cls, directory) -> "SimilarityModel":
        manifest, state = load_checkpoint(directory, "similarity")
        model = cls(SimilarityConfig(**manifest["config"]))
        model.load_state_dict(state)
        model.eval()
        return model


def train_similarity(dataset, cfg: SimilarityConfig = None, steps: int = 2000, batch_size: int = 64,
                     lr: float = 1e-3, seed: int = 0, log_every: int = 200) -> SimilarityModel:
    """Symmetric InfoNCE over in-batch (image, caption) pairs."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SimilarityModel(cfg)
    images = np.stack([s.image for s in dataset])
    captions = [s.caption for s in dataset]
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    for step in range(steps):
        idx = rng.choice(len(dataset), batch_size, replace=False)
        zi = model.embed_images(images[idx])
        zt = model.embed_texts([captions[i] for i in idx])
        logits = model.logit_scale.exp().clamp(max=100) * zi @ zt.T
        target = torch.arange(batch_size)
        loss = (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("similarity step %d loss %.4f", step, loss.item())
    model.eval()
    return model


@torch.no_grad()
def similarity_scores(images, captions: Sequence[str], model: SimilarityModel,
                      batch_size: int = 256) -> List[float]:
    out = []
    for b in range(0, len(captions), batch_size):
        zi = model.embed_images(np.asarray(images[b:b + batch_size]))
        zt = model.embed_texts(captions[b:b + batch_size])
        out += (zi * zt).sum(-1).tolist()
    return out


def similarity_accuracy(images, correct: Sequence[str], adversarial: Sequence[str],
                        model: SimilarityModel) -> float:
    """Percent of images whose own caption beats the attribute-swapped one; ties fail."""
    return accuracy_from_scores(similarity_scores(images, correct, model),
                                similarity_scores(images, adversarial, model))
