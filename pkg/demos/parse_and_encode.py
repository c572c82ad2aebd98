"""Walk one prompt through parsing, the dependency matrix and the DisCLIP encoding.

Runs in a second with a randomly initialised text encoder: the structure
of the outputs does not depend on trained weights.

    python demos/parse_and_encode.py "a golden car and a red watch"
"""

import sys

import numpy as np
import torch

from focusbind.disclip import encode_disclip, extend_dependency_matrix
from focusbind.encoder import TextEncoder
from focusbind.syntax import (abstract_constituency_tree, build_dependency_matrix, extract_constituents,
                              parse_prompt)
from focusbind.tokenizer import DEFAULT_TOKENIZER as TOK


def show_matrix(D, names):
    width = max(len(n) for n in names)
    print(" " * (width + 1) + " ".join(n[0] for n in names))
    for name, row in zip(names, D):
        print(f"{name:>{width}} " + " ".join("1" if v else "." for v in row))


def main(prompt):
    parse, tree = parse_prompt(prompt)
    tp = parse.tokens
    names = TOK.decode(tp.tokens)
    print("words:   ", tp.words)
    print("tokens:  ", names)
    print("kept dependency edges:")
    for e in parse.edges:
        print(f"  {tp.words[e.dep]} --{e.rel}--> {tp.words[e.head]}")

    # row j marks the tokens that token j depends on
    D = build_dependency_matrix(parse)
    print("\ndependency matrix D (rows depend on columns):")
    show_matrix(D, names)

    atree = abstract_constituency_tree(tree)
    cons = extract_constituents(atree)
    print("\nabstracted sentence:", " ".join(atree.surface(atree.kept_constituents[0])))
    for c in cons:
        # spans index tokens, not words
        print("constituent:", names[c.span[0]:c.span[1]])

    torch.manual_seed(0)
    enc = encode_disclip(tp, atree, TextEncoder(), names)
    print(f"\nDisCLIP encoding: {enc.embeddings.shape[0]} rows (plain encoding has {tp.n})")
    for seg in enc.segments:
        a, b = seg.rows
        print(f"  {str(seg.source):>6}: rows {a}-{b - 1}  {enc.token_strings[a:b]}")

    Dx = extend_dependency_matrix(D, enc, cons)
    print("\nextended D:")
    show_matrix(Dx, enc.token_strings)
    print("\nnon-zero entries:", int(np.count_nonzero(Dx)))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "a golden car and a red watch")
