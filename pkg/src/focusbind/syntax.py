"""Dependency and constituency structures over prompt tokens.

Parses come either from the built-in template parser, which handles the
``<adj> <noun> and <adj> <noun>`` sentences used throughout the benchmarks,
or from precomputed parse JSON files produced by an external parser.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .tokenizer import DEFAULT_TOKENIZER, ToyTokenizer, TokenizedPrompt, split_words

Span = Tuple[int, int]

DEFAULT_KEEP_RELATIONS: FrozenSet[str] = frozenset({"amod", "acomp", "attr"})

_SENTENCE_LABELS = {"S", "ROOT", "SENTENCE", "TOP"}
_ARTICLES = {"a", "an", "the"}


class ParseError(ValueError):
    """The template parser could not recognise the sentence."""


class ParseSchemaError(ValueError):
    """A parse JSON document is malformed. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AbstractionError(ValueError):
    pass


@dataclass(frozen=True)
class Dependency:
    dep: int
    head: int
    rel: str


@dataclass(frozen=True)
class DependencyParse:
    edges: Tuple[Dependency, ...]
    tokens: TokenizedPrompt

    def __post_init__(self):
        nw = len(self.tokens.words)
        for e in self.edges:
            if e.dep == e.head:
                raise ValueError(f"self-edge on word {e.dep}")
            if not (0 <= e.dep < nw and 0 <= e.head < nw):
                raise ValueError(f"edge {e} outside {nw} words")


@dataclass(frozen=True)
class Node:
    """A constituency node over the half-open word span ``span``.

    ``label`` is the raw parser label (``S``, ``NP``, ``JJ``...). Leaves have
    no children and cover exactly one word.
    """

    label: str
    span: Span
    children: Tuple["Node", ...] = ()
    head: Optional[int] = None

    @property
    def kind(self) -> str:
        lab = self.label.upper()
        if lab in _SENTENCE_LABELS:
            return "sentence"
        if lab == "NP":
            return "NP"
        return "other"

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self) -> Iterator["Node"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def leaves(self) -> List["Node"]:
        return [n for n in self.walk() if n.is_leaf]


def _check_node(node: Node, nwords: int, path: str) -> None:
    s, e = node.span
    if not (0 <= s < e <= nwords):
        raise ValueError(f"{path}: span {node.span} outside {nwords} words")
    if node.is_leaf:
        if e - s != 1:
            raise ValueError(f"{path}: leaf spans {e - s} words")
        return
    pos = s
    for i, c in enumerate(node.children):
        if c.span[0] != pos:
            raise ValueError(f"{path}: children do not partition span {node.span}")
        pos = c.span[1]
        _check_node(c, nwords, f"{path}.children[{i}]")
    if pos != e:
        raise ValueError(f"{path}: children do not partition span {node.span}")
    if node.head is not None and not (s <= node.head < e):
        raise ValueError(f"{path}: head {node.head} outside span {node.span}")


@dataclass(frozen=True)
class ConstituencyTree:
    root: Node
    tokens: TokenizedPrompt

    def __post_init__(self):
        _check_node(self.root, len(self.tokens.words), "root")


@dataclass(frozen=True)
class AbstractedTree:
    """Constituency tree whose upper NPs read as their sub-NPs' head nouns.

    ``base`` keeps the full structure (with NP heads resolved); the abstraction
    lives in ``removed_words``, keyed by NP span. ``kept_constituents`` starts
    with the full-sentence span, followed by the minimal NPs left to right.
    """

    base: ConstituencyTree
    kept_constituents: Tuple[Span, ...]
    removed_words: Dict[Span, Tuple[int, ...]] = field(default_factory=dict)

    @property
    def sentence(self) -> Span:
        return self.kept_constituents[0]

    @property
    def noun_phrases(self) -> Tuple[Span, ...]:
        return self.kept_constituents[1:]

    def surface(self, span: Span) -> List[str]:
        """Words of the node at ``span`` after abstraction."""
        gone = set(self.removed_words.get(span, ()))
        return [self.base.tokens.words[i] for i in range(*span) if i not in gone]


# -- parsing -------------------------------------------------------------

def _template_parse(tp: TokenizedPrompt) -> Tuple[DependencyParse, ConstituencyTree]:
    words = list(tp.words)
    i = 0
    nps = []
    for k in range(2):
        start = i
        if i < len(words) and words[i] in _ARTICLES:
            i += 1
        if i + 2 > len(words) or not all(re.fullmatch(r"[a-z]+", w) for w in words[i:i + 2]):
            raise ParseError(f"expected '<adj> <noun>' at word {i} of {' '.join(words)!r}")
        adj, noun = i, i + 1
        if words[adj] in _ARTICLES or words[noun] in _ARTICLES | {"and"}:
            raise ParseError(f"unexpected determiner/conjunction in {' '.join(words)!r}")
        i += 2
        nps.append((start, adj, noun, i))
        if k == 0:
            if i >= len(words) or words[i] != "and":
                raise ParseError(f"expected 'and' at word {i} of {' '.join(words)!r}")
            conj = i
            i += 1
    punct = None
    if i < len(words) and words[i] == ".":
        punct = i
        i += 1
    if i != len(words):
        raise ParseError(f"trailing words after template in {' '.join(words)!r}")

    edges = tuple(Dependency(adj, noun, "amod") for _, adj, noun, _ in nps)
    np_nodes = []
    for start, adj, noun, end in nps:
        leaves = []
        if adj > start:
            leaves.append(Node("DT", (start, start + 1)))
        leaves += [Node("JJ", (adj, adj + 1)), Node("NN", (noun, noun + 1))]
        np_nodes.append(Node("NP", (start, end), tuple(leaves), head=noun))
    coord = Node("NP", (np_nodes[0].span[0], np_nodes[1].span[1]),
                 (np_nodes[0], Node("CC", (conj, conj + 1)), np_nodes[1]),
                 head=np_nodes[1].head)
    top = [coord] + ([Node(".", (punct, punct + 1))] if punct is not None else [])
    root = Node("S", (0, len(words)), tuple(top))
    return DependencyParse(edges, tp), ConstituencyTree(root, tp)


def _node_from_json(obj, path: str) -> Node:
    if not isinstance(obj, dict):
        raise ParseSchemaError(path, "expected an object")
    for key in ("label", "span"):
        if key not in obj:
            raise ParseSchemaError(f"{path}.{key}", "missing")
    span = obj["span"]
    if (not isinstance(span, list) or len(span) != 2
            or not all(isinstance(v, int) for v in span)):
        raise ParseSchemaError(f"{path}.span", "expected [start, end] integers")
    head = obj.get("head")
    if head is not None and not isinstance(head, int):
        raise ParseSchemaError(f"{path}.head", "expected an integer")
    kids = obj.get("children", [])
    if not isinstance(kids, list):
        raise ParseSchemaError(f"{path}.children", "expected a list")
    children = tuple(_node_from_json(c, f"{path}.children[{i}]") for i, c in enumerate(kids))
    return Node(str(obj["label"]), (span[0], span[1]), children, head)


def parse_from_dict(doc: dict) -> Tuple[DependencyParse, ConstituencyTree]:
    """Build parse structures from a decoded parse JSON document."""
    if not isinstance(doc, dict):
        raise ParseSchemaError("<root>", "expected an object")
    for key in ("words", "tokens", "word_to_tokens", "dependencies", "constituency"):
        if key not in doc:
            raise ParseSchemaError(key, "missing")
    words = doc["words"]
    if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
        raise ParseSchemaError("words", "expected a list of strings")
    tokens = doc["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
        raise ParseSchemaError("tokens", "expected a list of integer ids")
    w2t = doc["word_to_tokens"]
    if (not isinstance(w2t, list)
            or not all(isinstance(r, list) and len(r) == 2 and all(isinstance(v, int) for v in r)
                       for r in w2t)):
        raise ParseSchemaError("word_to_tokens", "expected a list of [start, end] pairs")
    try:
        tp = TokenizedPrompt(tuple(words), tuple(tokens), tuple((s, e) for s, e in w2t))
    except ValueError as exc:
        raise ParseSchemaError("word_to_tokens", str(exc)) from None

    deps = doc["dependencies"]
    if not isinstance(deps, list):
        raise ParseSchemaError("dependencies", "expected a list")
    edges = []
    for i, d in enumerate(deps):
        for key in ("dep", "head", "rel"):
            if not isinstance(d, dict) or key not in d:
                raise ParseSchemaError(f"dependencies[{i}].{key}", "missing")
        for key in ("dep", "head"):
            if not isinstance(d[key], int) or not 0 <= d[key] < len(words):
                raise ParseSchemaError(f"dependencies[{i}].{key}",
                                       f"{d[key]!r} is not a word index below {len(words)}")
        if d["dep"] == d["head"]:
            raise ParseSchemaError(f"dependencies[{i}]", "self-edge")
        edges.append(Dependency(d["dep"], d["head"], str(d["rel"])))

    root = _node_from_json(doc["constituency"], "constituency")
    try:
        tree = ConstituencyTree(root, tp)
    except ValueError as exc:
        raise ParseSchemaError("constituency", str(exc)) from None
    return DependencyParse(tuple(edges), tp), tree


def _node_to_json(node: Node) -> dict:
    out = {"label": node.label, "span": list(node.span)}
    if node.head is not None:
        out["head"] = node.head
    if node.children:
        out["children"] = [_node_to_json(c) for c in node.children]
    return out


def parse_to_dict(parse: DependencyParse, tree: ConstituencyTree) -> dict:
    tp = parse.tokens
    return {
        "words": list(tp.words),
        "tokens": list(tp.tokens),
        "word_to_tokens": [list(r) for r in tp.word_to_tokens],
        "dependencies": [{"dep": e.dep, "head": e.head, "rel": e.rel} for e in parse.edges],
        "constituency": _node_to_json(tree.root),
    }


def load_parse(path: Union[str, Path]) -> Tuple[DependencyParse, ConstituencyTree]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseSchemaError("<root>", f"invalid JSON: {exc}") from None
    return parse_from_dict(doc)


def parse_prompt(
    prompt: str,
    backend: str = "template",
    parse_file: Union[str, Path, None] = None,
    tokenizer: Optional[ToyTokenizer] = None,
) -> Tuple[DependencyParse, ConstituencyTree]:
    """Parse ``prompt`` with the template parser or read a precomputed parse.

    With ``backend="file"`` the JSON at ``parse_file`` is returned as-is after
    validation; its words must match the prompt's words.
    """
    if not prompt or not prompt.strip():
        raise ParseError("empty prompt")
    if backend == "template":
        tok = tokenizer or DEFAULT_TOKENIZER
        return _template_parse(tok.tokenize(prompt))
    if backend == "file":
        if parse_file is None:
            raise ValueError("backend 'file' needs parse_file")
        parse, tree = load_parse(parse_file)
        if [w.lower() for w in parse.tokens.words] != split_words(prompt):
            raise ParseSchemaError("words", "do not match the prompt")
        return parse, tree
    raise ValueError(f"unknown parser backend {backend!r}")


# -- dependency matrix ---------------------------------------------------

def build_dependency_matrix(
    parse: DependencyParse,
    keep_relations: Iterable[str] = DEFAULT_KEEP_RELATIONS,
) -> np.ndarray:
    """Binary n x n matrix; row j marks the tokens token j depends on.

    Word-level edges fan out to every (dependent token, head token) pair.
    """
    keep = set(keep_relations)
    tp = parse.tokens
    D = np.zeros((tp.n, tp.n), dtype=np.uint8)
    for e in parse.edges:
        if e.rel not in keep:
            continue
        ds, de = tp.word_to_tokens[e.dep]
        hs, he = tp.word_to_tokens[e.head]
        D[ds:de, hs:he] = 1
    return D


# -- abstraction ---------------------------------------------------------

def _resolve_head(node: Node) -> int:
    if node.head is not None:
        return node.head
    nouns = [leaf for leaf in node.leaves() if leaf.label.upper().startswith("NN")]
    if not nouns:
        raise AbstractionError(f"NP at words {node.span} has no resolvable head noun")
    return nouns[-1].span[0]


def _with_heads(node: Node) -> Node:
    children = tuple(_with_heads(c) for c in node.children)
    head = _resolve_head(node) if node.kind == "NP" else node.head
    return replace(node, children=children, head=head)


def _nearest_nps(node: Node) -> List[Node]:
    out = []
    for c in node.children:
        if c.kind == "NP":
            out.append(c)
        else:
            out.extend(_nearest_nps(c))
    return out


def abstract_constituency_tree(tree: ConstituencyTree) -> AbstractedTree:
    """Replace the sub-NPs of every NP that dominates another NP by their heads.

    Minimal NPs (no NP below them) are kept whole as constituents, together
    with the full sentence.
    """
    root = _with_heads(tree.root)
    removed: Dict[Span, Tuple[int, ...]] = {}
    kept: List[Span] = []
    for node in root.walk():
        if node.kind != "NP":
            continue
        subs = _nearest_nps(node)
        if not subs:
            kept.append(node.span)
            continue
        gone = [w for sub in subs for w in range(*sub.span) if w != sub.head]
        removed[node.span] = tuple(sorted(gone))
    kept.sort()
    return AbstractedTree(ConstituencyTree(root, tree.tokens), (root.span, *kept), removed)


@dataclass(frozen=True)
class Constituent:
    span: Tuple[int, int]  # token range
    noun_token_positions: Tuple[int, ...]
    word_span: Tuple[int, int]


def extract_constituents(atree: AbstractedTree) -> List[Constituent]:
    """Token spans and head-noun token positions of the kept noun phrases."""
    tp = atree.base.tokens
    heads = {n.span: n.head for n in atree.base.root.walk() if n.kind == "NP"}
    out = []
    for span in atree.noun_phrases:
        s, e = tp.token_range(span)
        hs, he = tp.word_to_tokens[heads[span]]
        out.append(Constituent((s, e), tuple(range(hs, he)), span))
    out.sort(key=lambda c: c.span)
    return out


def template_sentence(attr1: str, obj1: str, attr2: str, obj2: str) -> str:
    return f"{attr1} {obj1} and {attr2} {obj2}."
