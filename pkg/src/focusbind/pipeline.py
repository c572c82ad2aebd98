"""Prompt preparation and binding evaluation shared by the CLI and the demos."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .benchgen import AdversarialPair, binding_oracle
from .diffusion import GenerationResult, PromptBundle, ToyDiffusion, generate
from .disclip import encode_disclip, extend_dependency_matrix
from .encoder import encode_prompt
from .syntax import (abstract_constituency_tree, build_dependency_matrix, extract_constituents,
                     parse_prompt)


def prepare_prompt(model: ToyDiffusion, prompt: str, disclip: bool = False, backend: str = "template",
                   parse_file: Union[str, Path, None] = None) -> PromptBundle:
    """Parse, encode and build the dependency matrix for one prompt."""
    parse, tree = parse_prompt(prompt, backend, parse_file, model.tokenizer)
    tp = parse.tokens
    names = model.tokenizer.decode(tp.tokens)
    D = build_dependency_matrix(parse)
    with torch.no_grad():
        if not disclip:
            y = encode_prompt(model, tp.tokens)
            return PromptBundle(y, D, names, prompt)
        atree = abstract_constituency_tree(tree)
        enc = encode_disclip(tp, atree, model, names)
        Dx = extend_dependency_matrix(D, enc, extract_constituents(atree))
    return PromptBundle(enc.embeddings, Dx, enc.token_strings, prompt)


@dataclass
class BindingReport:
    n: int
    both_correct: float
    one_correct: float
    leakage: float
    mask_density: Optional[float] = None
    per_image: List[dict] = field(default_factory=list)

    def row(self) -> dict:
        return {"n": self.n, "both_correct": self.both_correct, "one_correct": self.one_correct,
                "leakage": self.leakage, "mask_density": self.mask_density}


def oracle_report(results: Sequence[GenerationResult], graphs) -> BindingReport:
    per, dens = [], []
    for r, g in zip(results, graphs):
        o = binding_oracle(r.image, g)
        per.append({"prompt": r.prompt, "seed": r.seed, "both_correct": o.both_correct,
                    "one_correct": o.one_correct, "leaked": o.leaked,
                    "dominant": list(o.dominant)})
        if r.focus_mask is not None:
            dens.append(r.focus_mask.masked_fraction())
    n = len(per)
    if n == 0:
        raise ValueError("nothing to evaluate")

    def rate(key):
        return 100.0 * sum(p[key] for p in per) / n

    return BindingReport(n, rate("both_correct"), rate("one_correct"), rate("leaked"),
                         float(np.mean(dens)) if dens else (0.0 if results[0].mode == "fca" else None),
                         per)


def evaluate_binding(model: ToyDiffusion, pairs: Sequence[AdversarialPair], seeds: Sequence[int],
                     mode: str = "baseline", threshold: float = 0.5, disclip: bool = False,
                     early_stop_frac: float = 0.1, steps: Optional[int] = None,
                     guidance: Optional[float] = None, both_sides: bool = True):
    """Generate every prompt of every pair under every seed and run the oracle.

    With ``both_sides`` both the sentence and its attribute-swapped twin are
    generated, so each pair contributes two prompts.
    """
    prompts, graphs = [], []
    for p in pairs:
        prompts.append((p.sentence, p.graph))
        if both_sides:
            prompts.append((p.adversarial_sentence, p.adversarial_graph))
    cache: Dict[str, PromptBundle] = {}
    bundles, gs, ss = [], [], []
    for text, g in prompts:
        if text not in cache:
            cache[text] = prepare_prompt(model, text, disclip=disclip)
        for s in seeds:
            bundles.append(cache[text])
            gs.append(g)
            ss.append(int(s))
    results = generate(model, bundles, ss, mode, threshold, early_stop_frac, steps, guidance)
    return oracle_report(results, gs), results
