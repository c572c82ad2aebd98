"""Edge-prediction ViT: a graph-conditioned evaluator for attribute binding.

Two object names are encoded with a frozen text encoder and added to the ViT
class embedding through a zero-initialised affine injection, so the model
starts out as the plain ViT. Five linear heads predict the relation, the
attributes of each object and the two object classes.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import TextEncoder
from .graph import EvalGraph
from .tokenizer import COLORS, DEFAULT_TOKENIZER, SHAPES

log = logging.getLogger(__name__)

PAPER_LABEL_COUNTS = {"relations": 100, "attributes": 100, "objects": 200}
TOY_RELATIONS = ("left", "right", "above", "below")
_INVERSE = {"left": "right", "right": "left", "above": "below", "below": "above"}


class LabelError(ValueError):
    pass


@dataclass
class EPViTConfig:
    image_size: int = 32
    patch_size: int = 4
    width: int = 64
    depth: int = 3
    heads: int = 4
    obj_dim: int = 64
    text_depth: int = 1
    relations: Tuple[str, ...] = TOY_RELATIONS
    attributes: Tuple[str, ...] = COLORS
    objects: Tuple[str, ...] = SHAPES

    def __post_init__(self):
        self.relations = tuple(self.relations)
        self.attributes = tuple(self.attributes)
        self.objects = tuple(self.objects)
        if self.image_size % self.patch_size:
            raise ValueError("patch size must divide the image size")

    @property
    def n_rel(self) -> int:
        return len(self.relations)

    @property
    def n_attr(self) -> int:
        return len(self.attributes)

    @property
    def n_obj(self) -> int:
        return len(self.objects)

    def label_manifest(self) -> dict:
        return {"relations": list(self.relations), "attributes": list(self.attributes),
                "objects": list(self.objects)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(self.label_manifest())
        return d


def label_space_from_corpus(corpus: dict, n_rel: int = 100, n_attr: int = 100, n_obj: int = 200) -> dict:
    """Most frequent labels after lowercasing and stripping, as a label manifest."""
    rel, attr, obj = Counter(), Counter(), Counter()
    for g in corpus.get("graphs", []):
        for o in g.get("objects", []):
            obj[o["name"].strip().lower()] += 1
            for a in o.get("attributes", []):
                attr[a.strip().lower()] += 1
        for r in g.get("relations", []):
            rel[r["p"].strip().lower()] += 1

    def top(c, k):
        return [name for name, _ in sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]

    return {"relations": top(rel, n_rel), "attributes": top(attr, n_attr), "objects": top(obj, n_obj)}


def write_label_manifest(cfg: EPViTConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(cfg.label_manifest(), indent=2))


def read_label_manifest(path: Union[str, Path]) -> dict:
    d = json.loads(Path(path).read_text())
    for key in ("relations", "attributes", "objects"):
        if not isinstance(d.get(key), list):
            raise LabelError(f"label manifest lacks a '{key}' list")
    return d


# -- model ---------------------------------------------------------------

def inject_objects(ce: torch.Tensor, obj1: torch.Tensor, obj2: torch.Tensor,
                   alpha, beta, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``ce + alpha * (W @ concat(obj1, obj2) + b) + beta``."""
    z = torch.cat([obj1, obj2], dim=-1)
    if W.shape[-1] != z.shape[-1] or W.shape[0] != ce.shape[-1]:
        raise ValueError(f"W of shape {tuple(W.shape)} cannot map {z.shape[-1]} -> {ce.shape[-1]}")
    return ce + alpha * (z @ W.T + b) + beta


class ZeroInjection(nn.Module):
    def __init__(self, obj_dim: int, width: int):
        super().__init__()
        self.proj = nn.Linear(2 * obj_dim, width)
        self.alpha = nn.Parameter(torch.zeros(()))
        self.beta = nn.Parameter(torch.zeros(()))

    def forward(self, ce, obj1, obj2):
        return inject_objects(ce, obj1, obj2, self.alpha, self.beta, self.proj.weight, self.proj.bias)


class ViT(nn.Module):
    def __init__(self, cfg: EPViTConfig):
        super().__init__()
        p = cfg.patch_size
        n_patches = (cfg.image_size // p) ** 2
        self.patch = nn.Conv2d(3, cfg.width, p, stride=p)
        self.class_embedding = nn.Parameter(torch.randn(cfg.width) * 0.02)
        self.pos = nn.Parameter(torch.randn(n_patches + 1, cfg.width) * 0.02)
        layer = nn.TransformerEncoderLayer(cfg.width, cfg.heads, cfg.width * 4, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.width)

    def forward(self, images: torch.Tensor, ce: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Class-token features; ``ce`` overrides the class embedding per sample."""
        x = self.patch(images).flatten(2).transpose(1, 2)
        if ce is None:
            ce = self.class_embedding.expand(x.shape[0], -1)
        x = torch.cat([ce[:, None], x], dim=1) + self.pos
        return self.norm(self.blocks(x)[:, 0])


class EPViTOutputs(NamedTuple):
    rel: torch.Tensor
    attr1: torch.Tensor
    attr2: torch.Tensor
    obj1: torch.Tensor
    obj2: torch.Tensor


class EPViT(nn.Module):
    def __init__(self, cfg: EPViTConfig = None):
        super().__init__()
        self.cfg = cfg = cfg or EPViTConfig()
        self.tokenizer = DEFAULT_TOKENIZER
        self.text = TextEncoder(len(self.tokenizer), cfg.obj_dim, cfg.text_depth)
        self.text.requires_grad_(False)
        self.vit = ViT(cfg)
        self.inject = ZeroInjection(cfg.obj_dim, cfg.width)
        self.rel_head = nn.Linear(cfg.width, cfg.n_rel)
        self.attr1_head = nn.Linear(cfg.width, cfg.n_attr)
        self.attr2_head = nn.Linear(cfg.width, cfg.n_attr)
        self.obj1_head = nn.Linear(cfg.width, cfg.n_obj)
        self.obj2_head = nn.Linear(cfg.width, cfg.n_obj)

    def object_embeddings(self, names: Sequence[str]) -> torch.Tensor:
        with torch.no_grad():
            return torch.stack([self.text.pooled(n, self.tokenizer) for n in names])

    def features(self, images, obj1: torch.Tensor, obj2: torch.Tensor) -> torch.Tensor:
        ce = self.vit.class_embedding.expand(images.shape[0], -1)
        return self.vit(images, self.inject(ce, obj1, obj2))

    def forward(self, images: torch.Tensor, obj1_names: Sequence[str], obj2_names: Sequence[str]) -> EPViTOutputs:
        images = prepare_images(images)
        e1 = self.object_embeddings(obj1_names)
        e2 = self.object_embeddings(obj2_names)
        h = self.features(images, e1, e2)
        return EPViTOutputs(self.rel_head(h), self.attr1_head(h), self.attr2_head(h),
                            self.obj1_head(h), self.obj2_head(h))

    def save(self, directory, extra: dict = None) -> Path:
        directory = Path(directory)
        save_checkpoint(directory, "epvit", self.cfg.to_dict(), self.state_dict(), extra)
        write_label_manifest(self.cfg, directory / "labels.json")
        return directory

    @classmethod
    def load(cls, directory) -> "EPViT":
        manifest, state = load_checkpoint(directory, "epvit")
        model = cls(EPViTConfig(**manifest["config"]))
        model.load_state_dict(state)
        model.eval()
        return model


def prepare_images(images) -> torch.Tensor:
    """uint8 (B, H, W, 3) arrays become float (B, 3, H, W) in [-1, 1]."""
    if isinstance(images, np.ndarray) or (torch.is_tensor(images) and images.dtype == torch.uint8):
        x = torch.as_tensor(np.asarray(images))
        if x.dim() == 3:
            x = x[None]
        return x.permute(0, 3, 1, 2).float() / 127.5 - 1
    return images


def epvit_forward(image, obj1_name: str, obj2_name: str, model: EPViT) -> EPViTOutputs:
    """Single-image convenience wrapper around ``model(...)``."""
    out = model(image, [obj1_name], [obj2_name])
    return EPViTOutputs(*(t[0] for t in out))


# -- loss ----------------------------------------------------------------

def encode_labels(graphs: Sequence[EvalGraph], cfg: EPViTConfig) -> Dict[str, torch.Tensor]:
    rel_idx = {r: i for i, r in enumerate(cfg.relations)}
    attr_idx = {a: i for i, a in enumerate(cfg.attributes)}
    obj_idx = {o: i for i, o in enumerate(cfg.objects)}
    B = len(graphs)
    out = {"rel": torch.full((B,), -1, dtype=torch.long),
           "attr1": torch.zeros(B, cfg.n_attr), "attr2": torch.zeros(B, cfg.n_attr),
           "obj1": torch.zeros(B, dtype=torch.long), "obj2": torch.zeros(B, dtype=torch.long)}
    for i, g in enumerate(graphs):
        for key, name in (("obj1", g.obj1), ("obj2", g.obj2)):
            if name not in obj_idx:
                raise LabelError(f"object {name!r} is not in the label space")
            out[key][i] = obj_idx[name]
        if g.relation is not None:
            if g.relation not in rel_idx:
                raise LabelError(f"relation {g.relation!r} is not in the label space")
            out["rel"][i] = rel_idx[g.relation]
        for key, attrs in (("attr1", g.attrs1), ("attr2", g.attrs2)):
            for a in attrs:
                if a not in attr_idx:
                    raise LabelError(f"attribute {a!r} is not in the label space")
                out[key][i, attr_idx[a]] = 1.0
    return out


def epvit_loss(outputs: EPViTOutputs, labels: Union[Dict[str, torch.Tensor], Sequence[EvalGraph]],
               cfg: EPViTConfig = None) -> torch.Tensor:
    """Object CE terms plus relation CE and attribute BCE where annotated.

    Unannotated relations and attribute-less objects are left out of the
    graph entirely, so their heads receive exactly zero gradient from them.
    Each term is averaged over the samples that carry it.
    """
    if not isinstance(labels, dict):
        labels = encode_labels(labels, cfg)
    loss = F.cross_entropy(outputs.obj1, labels["obj1"]) + F.cross_entropy(outputs.obj2, labels["obj2"])
    has_rel = labels["rel"] >= 0
    if has_rel.any():
        loss = loss + F.cross_entropy(outputs.rel[has_rel], labels["rel"][has_rel])
    for key in ("attr1", "attr2"):
        has = labels[key].sum(dim=-1) > 0
        if has.any():
            logits = getattr(outputs, key)[has]
            loss = loss + F.binary_cross_entropy_with_logits(logits, labels[key][has])
    return loss


# -- scoring -------------------------------------------------------------

def _graph_loglik(out: EPViTOutputs, i: int, g: EvalGraph, cfg: EPViTConfig) -> float:
    terms = []
    for head, attrs in ((out.attr1, g.attrs1), (out.attr2, g.attrs2)):
        for a in attrs:
            if a not in cfg.attributes:
                raise LabelError(f"attribute {a!r} is not in the label space")
            terms.append(F.logsigmoid(head[i, cfg.attributes.index(a)]))
    if g.relation is not None:
        if g.relation not in cfg.relations:
            raise LabelError(f"relation {g.relation!r} is not in the label space")
        terms.append(F.log_softmax(out.rel[i], dim=-1)[cfg.relations.index(g.relation)])
    if not terms:
        raise ValueError("graph has no attributes and no relation; its score is undefined")
    return float(torch.stack(terms).mean())


@torch.no_grad()
def score_graphs(images, graphs: Sequence[EvalGraph], model: EPViT, batch_size: int = 256) -> List[float]:
    """Average attribute/relation log-likelihood of each graph on its image."""
    images = np.asarray(images) if not torch.is_tensor(images) else images
    scores = []
    for b in range(0, len(graphs), batch_size):
        gs = graphs[b:b + batch_size]
        out = model(images[b:b + batch_size], [g.obj1 for g in gs], [g.obj2 for g in gs])
        scores += [_graph_loglik(out, i, g, model.cfg) for i, g in enumerate(gs)]
    return scores


def score_graph(image, graph: EvalGraph, model: EPViT) -> float:
    return score_graphs(np.asarray(image)[None], [graph], model)[0]


def accuracy_from_scores(correct: Sequence[float], adversarial: Sequence[float]) -> float:
    """Percent of pairs where the correct graph scores strictly higher."""
    if len(correct) == 0:
        raise ValueError("no pairs to evaluate")
    wins = sum(1 for c, a in zip(correct, adversarial) if c > a)
    return 100.0 * wins / len(correct)


def epvit_accuracy(images, correct_graphs: Sequence[EvalGraph], adversarial_graphs: Sequence[EvalGraph],
                   model: EPViT) -> float:
    if len(correct_graphs) == 0:
        raise ValueError("no pairs to evaluate")
    return accuracy_from_scores(score_graphs(images, correct_graphs, model),
                                score_graphs(images, adversarial_graphs, model))


# -- training ------------------------------------------------------------

def _augment(g: EvalGraph, rng: np.random.Generator, p_swap: float, p_drop_rel: float,
             p_drop_attr: float) -> EvalGraph:
    if rng.random() < p_swap:
        rel = _INVERSE.get(g.relation, g.relation) if g.relation else None
        g = EvalGraph(g.obj2, g.obj1, g.attrs2, g.attrs1, rel)
    rel = None if rng.random() < p_drop_rel else g.relation
    a1 = () if rng.random() < p_drop_attr else g.attrs1
    a2 = () if rng.random() < p_drop_attr else g.attrs2
    return EvalGraph(g.obj1, g.obj2, a1, a2, rel)


def train_epvit(dataset, cfg: EPViTConfig = None, steps: int = 3000, batch_size: int = 64,
                lr: float = 1e-3, seed: int = 0, p_drop_rel: float = 0.3, p_drop_attr: float = 0.1,
                log_every: int = 200, text_encoder: Optional[TextEncoder] = None,
                gate_lr_scale: float = 10.0) -> EPViT:
    """Fit the five heads on (image, graph) samples with sparse-label dropout.

    Objects are randomly swapped (with the relation inverted) and some
    relation / attribute annotations are dropped so the obscured-loss path
    is exercised the way sparse real annotations would. The object-name
    encoder stays frozen; ``text_encoder`` supplies its weights. The two
    zero-initialised injection scalars learn ``gate_lr_scale`` times faster
    than the rest, since they start with a single scalar gradient each.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    model = EPViT(cfg)
    if text_encoder is not None:
        # share the prompt encoder so object names live in the same space
        model.text.load_state_dict(text_encoder.state_dict())
    rng = np.random.default_rng(seed)
    images = prepare_images(np.stack([s.image for s in dataset]))
    graphs = [s.graph for s in dataset]
    gates = [model.inject.alpha, model.inject.beta]
    rest = [p for p in model.parameters() if p.requires_grad and all(p is not g for g in gates)]
    opt = torch.optim.AdamW([{"params": rest, "weight_decay": 0.01},
                             {"params": gates, "weight_decay": 0.0}], lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=[lr, lr * gate_lr_scale], total_steps=steps,
                                                pct_start=0.1)
    model.history = []
    for step in range(steps):
        idx = rng.integers(0, len(dataset), batch_size)
        gs = [_augment(graphs[i], rng, 0.5, p_drop_rel, p_drop_attr) for i in idx]
        x = images[torch.as_tensor(idx)]
        out = model(x, [g.obj1 for g in gs], [g.obj2 for g in gs])
        loss = epvit_loss(out, gs, model.cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        model.history.append((step, loss.item()))
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("epvit step %d loss %.4f alpha %.4f beta %.4f", step, loss.item(),
                     model.inject.alpha.item(), model.inject.beta.item())
    model.eval()
    return model
