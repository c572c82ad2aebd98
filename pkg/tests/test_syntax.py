import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focusbind.syntax import (AbstractionError, ConstituencyTree, Dependency, DependencyParse, Node,
                              ParseError, ParseSchemaError, abstract_constituency_tree,
                              build_dependency_matrix, extract_constituents, load_parse,
                              parse_from_dict, parse_prompt, parse_to_dict, template_sentence)
from focusbind.tokenizer import COLORS, DEFAULT_TOKENIZER, SHAPES, TokenizationError

from oracles import word_level_dependency_matrix

TOK = DEFAULT_TOKENIZER


def edges_as_words(parse):
    w = parse.tokens.words
    return {(w[e.dep], w[e.head]) for e in parse.edges}


def surface(tp, span):
    return " ".join(tp.words[span[0]:span[1]])


def test_tokenizer_subwords():
    tp = TOK.tokenize("a golden car and a red watch")
    assert tp.words[1] == "golden"
    s, e = tp.word_to_tokens[1]
    assert e - s == 2
    assert TOK.decode(tp.tokens[s:e]) == ["gold", "##en"]
    assert tp.tokens[-1] == TOK.eos_id
    assert tp.n == len(tp.words) + 2


def test_tokenizer_rejects_unknown_characters():
    with pytest.raises(TokenizationError):
        TOK.tokenize("a red car ☃")


def test_template_parse_red_car_blue_bird():
    parse, tree = parse_prompt("a red car and a blue bird")
    assert edges_as_words(parse) == {("red", "car"), ("blue", "bird")}
    at = abstract_constituency_tree(tree)
    assert [surface(parse.tokens, s) for s in at.noun_phrases] == ["a red car", "a blue bird"]


def test_template_parse_yellow_grass():
    parse, _ = parse_prompt("yellow grass and silver fence")
    assert edges_as_words(parse) == {("yellow", "grass"), ("silver", "fence")}


@pytest.mark.parametrize("bad", ["a red car", "red car or blue bird", "a red car and a blue bird big",
                                 "and and", "the the car and red bird"])
def test_template_parse_failure_is_explicit(bad):
    with pytest.raises(ParseError):
        parse_prompt(bad)


def test_empty_prompt():
    with pytest.raises(ParseError):
        parse_prompt("   ")


def test_file_backend_echoes_contents(tmp_path):
    parse, tree = parse_prompt("a red car and a blue bird.")
    doc = parse_to_dict(parse, tree)
    doc["dependencies"].append({"dep": 0, "head": 2, "rel": "det"})
    f = tmp_path / "p.json"
    f.write_text(json.dumps(doc))
    p2, t2 = parse_prompt("a red car and a blue bird.", backend="file", parse_file=f)
    assert parse_to_dict(p2, t2) == doc


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.pop("words"), "words"),
    (lambda d: d["dependencies"].append({"dep": 99, "head": 0, "rel": "amod"}), "dependencies[2].dep"),
    (lambda d: d["dependencies"].append({"dep": 1}), "dependencies[2].head"),
    (lambda d: d["constituency"].update(span="x"), "constituency.span"),
    (lambda d: d.update(word_to_tokens=[[0, 1]]), "word_to_tokens"),
])
def test_schema_errors_name_field(mutate, field):
    parse, tree = parse_prompt("a red car and a blue bird.")
    doc = parse_to_dict(parse, tree)
    mutate(doc)
    with pytest.raises(ParseSchemaError) as ei:
        parse_from_dict(doc)
    assert ei.value.field == field


def test_malformed_json_file(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    with pytest.raises(ParseSchemaError):
        load_parse(f)


def test_single_edge_matrix():
    tp = TOK.tokenize_words(["a", "red", "car"])
    D = build_dependency_matrix(DependencyParse((Dependency(1, 2, "amod"),), tp))
    expected = np.zeros((4, 4), dtype=np.uint8)  # + end token
    expected[1, 2] = 1
    assert np.array_equal(D, expected)


def test_no_kept_edges_zero_matrix():
    tp = TOK.tokenize_words(["a", "red", "car"])
    D = build_dependency_matrix(DependencyParse((Dependency(0, 2, "det"),), tp))
    assert not D.any()


def test_subword_fanout_matches_word_level_oracle():
    parse, _ = parse_prompt("a golden car and a red watch")
    tp = parse.tokens
    D = build_dependency_matrix(parse)
    edges = [(e.dep, e.head, e.rel) for e in parse.edges]
    assert np.array_equal(D, word_level_dependency_matrix(tp.word_to_tokens, tp.n, edges))
    gs, ge = tp.word_to_tokens[1]
    car = tp.word_to_tokens[2][0]
    assert ge - gs == 2 and all(D[r, car] == 1 for r in range(gs, ge))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(COLORS + ("silver", "golden", "big")), st.sampled_from(SHAPES + ("car", "dog")),
       st.sampled_from(COLORS + ("black", "pink")), st.sampled_from(SHAPES + ("bird", "table")),
       st.booleans())
def test_template_round_trip_and_matrix_invariants(a1, o1, a2, o2, article):
    if o1 == o2:
        return
    text = template_sentence(a1, o1, a2, o2)
    if article:
        text = "a " + text.replace(" and ", " and a ")
    parse, tree = parse_prompt(text)
    assert edges_as_words(parse) == {(a1, o1), (a2, o2)}
    D = build_dependency_matrix(parse)
    assert set(np.unique(D)) <= {0, 1}
    assert not np.diag(D).any()
    tp = parse.tokens
    dep_tokens = {}
    for e in parse.edges:
        hs, he = tp.word_to_tokens[e.head]
        for t in range(*tp.word_to_tokens[e.dep]):
            dep_tokens[t] = he - hs
    for j in range(tp.n):
        assert D[j].sum() == dep_tokens.get(j, 0)
    at = abstract_constituency_tree(tree)
    cons = extract_constituents(at)
    spans = [c.span for c in cons]
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        assert e1 <= s2
    assert all(0 <= s < e <= tp.n - 1 for s, e in spans)
    # idempotence
    again = abstract_constituency_tree(at.base)
    assert again.kept_constituents == at.kept_constituents
    assert again.removed_words == at.removed_words


def golden_car_tree():
    tp = TOK.tokenize_words("a golden car and a red watch".split())
    np1 = Node("NP", (0, 3), (Node("DT", (0, 1)), Node("JJ", (1, 2)), Node("NN", (2, 3))))
    np2 = Node("NP", (4, 7), (Node("DT", (4, 5)), Node("JJ", (5, 6)), Node("NN", (6, 7))))
    coord = Node("NP", (0, 7), (np1, Node("CC", (3, 4)), np2))
    return ConstituencyTree(Node("S", (0, 7), (coord,)), tp)


def test_abstraction_golden_car():
    at = abstract_constituency_tree(golden_car_tree())
    assert at.surface((0, 7)) == ["car", "and", "watch"]
    assert at.removed_words[(0, 7)] == (0, 1, 4, 5)
    assert at.kept_constituents == ((0, 7), (0, 3), (4, 7))
    assert at.surface((0, 3)) == ["a", "golden", "car"]


def test_abstraction_single_np_unchanged():
    tp = TOK.tokenize_words("the big dog".split())
    np_ = Node("NP", (0, 3), (Node("DT", (0, 1)), Node("JJ", (1, 2)), Node("NN", (2, 3))))
    at = abstract_constituency_tree(ConstituencyTree(Node("S", (0, 3), (np_,)), tp))
    assert at.removed_words == {}
    assert at.kept_constituents == ((0, 3), (0, 3))
    assert len(extract_constituents(at)) == 1


def test_abstraction_np_inside_pp():
    words = "the big dog on the red table".split()
    tp = TOK.tokenize_words(words)
    inner = Node("NP", (0, 3), (Node("DT", (0, 1)), Node("JJ", (1, 2)), Node("NN", (2, 3))))
    obj = Node("NP", (4, 7), (Node("DT", (4, 5)), Node("JJ", (5, 6)), Node("NN", (6, 7))))
    pp = Node("PP", (3, 7), (Node("IN", (3, 4)), obj))
    outer = Node("NP", (0, 7), (inner, pp))
    at = abstract_constituency_tree(ConstituencyTree(Node("S", (0, 7), (outer,)), tp))
    assert at.surface((0, 7)) == ["dog", "on", "table"]
    assert at.kept_constituents == ((0, 7), (0, 3), (4, 7))
    # the PP keeps its structure; only NP-dominating-NP nodes get entries
    assert set(at.removed_words) == {(0, 7)}
    pp_node = next(n for n in at.base.root.walk() if n.label == "PP")
    assert [c.label for c in pp_node.children] == ["IN", "NP"]


def test_three_np_fixture_left_to_right():
    words = "a red car and a blue bird and a white dog".split()
    tp = TOK.tokenize_words(words)

    def np_at(s):
        return Node("NP", (s, s + 3), (Node("DT", (s, s + 1)), Node("JJ", (s + 1, s + 2)),
                                       Node("NN", (s + 2, s + 3))))
    coord = Node("NP", (0, 11), (np_at(0), Node("CC", (3, 4)), np_at(4), Node("CC", (7, 8)), np_at(8)))
    at = abstract_constituency_tree(ConstituencyTree(Node("S", (0, 11), (coord,)), tp))
    cons = extract_constituents(at)
    assert [c.span for c in cons] == [(0, 3), (4, 7), (8, 11)]
    assert [c.noun_token_positions for c in cons] == [(2,), (6,), (10,)]


def test_abstraction_error_lists_span():
    tp = TOK.tokenize_words("a red big".split())
    np_ = Node("NP", (0, 3), (Node("DT", (0, 1)), Node("JJ", (1, 2)), Node("JJ", (2, 3))))
    with pytest.raises(AbstractionError, match=r"\(0, 3\)"):
        abstract_constituency_tree(ConstituencyTree(Node("S", (0, 3), (np_,)), tp))


def test_constituents_of_template():
    parse, tree = parse_prompt("a red car and a blue bird")
    cons = extract_constituents(abstract_constituency_tree(tree))
    names = [TOK.decode([parse.tokens.tokens[k] for k in c.noun_token_positions]) for c in cons]
    assert names == [["car"], ["bird"]]
