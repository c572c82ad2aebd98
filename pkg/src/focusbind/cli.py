"""Batch command line: generation, evaluation, sweeps, data and training jobs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error. Failures
print a one-line JSON error record on stderr (and into ``error.json`` in the
output directory when there is one).

A ``--config FILE`` of ``key = value`` lines may stand in for flags; keys are
long option names, ``#`` starts a comment, booleans are true/false, and lists
are comma separated. Flags on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

log = logging.getLogger("focusbind")

CHECKPOINT_ENV = "FOCUSBIND_CHECKPOINT_DIR"
ASSETS = Path(__file__).resolve().parent / "assets" / "checkpoints"

DEFAULTS = {"steps": 50, "guidance": 7.5, "threshold": 0.5, "early_stop": 0.1}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- small helpers -------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _png_bytes(image: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(cfg: dict) -> str:
    return _sha256(json.dumps(cfg, sort_keys=True, default=str).encode())


def _prepare_out(out: Path, overwrite: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(f"output directory {out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad number list {text!r}") from e


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad integer list {text!r}") from e


def resolve_checkpoint(path: Optional[str], kind: str) -> Path:
    """Explicit path, else ``$FOCUSBIND_CHECKPOINT_DIR/<kind>``, else the shipped one."""
    if path:
        p = Path(path)
    elif os.environ.get(CHECKPOINT_ENV):
        p = Path(os.environ[CHECKPOINT_ENV]) / kind
    else:
        p = ASSETS / kind
    if not (p / "manifest.json").exists():
        raise DataError(f"no {kind} checkpoint at {p}")
    return p


def _load_diffusion(path):
    from .diffusion import ToyDiffusion

    return ToyDiffusion.load(resolve_checkpoint(path, "diffusion"))


def read_benchmark(path: Path):
    """Benchmark JSONL written by ``make-benchmark``."""
    from .benchgen import AdversarialPair
    from .graph import EvalGraph

    pairs = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            pairs.append(AdversarialPair(d["sentence"], d["adversarial_sentence"],
                                         EvalGraph.from_dict(d["graph"]),
                                         EvalGraph.from_dict(d["adversarial_graph"])))
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{path}:{i + 1}: bad benchmark record ({e})") from e
    return pairs


def _read_prompts(args) -> List[dict]:
    """Prompt records: ``{"prompt", "graph"?}``; graphs come from benchmark files."""
    if args.prompt:
        return [{"prompt": p} for p in args.prompt]
    if not args.prompt_file:
        raise UsageError("give --prompt or --prompt-file")
    path = Path(args.prompt_file)
    if not path.exists():
        raise DataError(f"prompt file {path} not found")
    if path.suffix == ".jsonl":
        out = []
        for p in read_benchmark(path):
            out.append({"prompt": p.sentence, "graph": p.graph.to_dict(),
                        "adversarial_graph": p.adversarial_graph.to_dict()})
            out.append({"prompt": p.adversarial_sentence, "graph": p.adversarial_graph.to_dict(),
                        "adversarial_graph": p.graph.to_dict()})
        return out
    return [{"prompt": line.strip()} for line in path.read_text().splitlines() if line.strip()]


# -- commands ------------------------------------------------------------

def cmd_generate(args) -> int:
    from .diffusion import generate
    from .fca import aggregate_attention, write_dump
    from .pipeline import prepare_prompt

    model = _load_diffusion(args.checkpoint)
    records = _read_prompts(args)
    if args.parse_file and len(records) != 1:
        raise UsageError("--parse-file applies to a single prompt")
    seeds = _ints(args.seeds)
    if not seeds:
        raise UsageError("need at least one seed")
    out = _prepare_out(Path(args.out), args.overwrite)
    mode = "fca" if args.fca else "baseline"
    run_cfg = {"checkpoint_config": model.cfg.to_dict(), "mode": mode, "disclip": args.disclip,
               "steps": args.steps, "guidance": args.guidance, "threshold": args.threshold,
               "early_stop_frac": args.early_stop, "seeds": seeds,
               "prompts": [r["prompt"] for r in records]}
    bundles, ss, owners = [], [], []
    for pi, r in enumerate(records):
        b = prepare_prompt(model, r["prompt"], args.disclip,
                           "file" if args.parse_file else "template", args.parse_file)
        for s in seeds:
            bundles.append(b)
            ss.append(s)
            owners.append(pi)
    results = generate(model, bundles, ss, mode, args.threshold, args.early_stop, args.steps,
                       args.guidance, record=args.dump_attention)
    images, pairs = [], []
    for k, (res, pi) in enumerate(zip(results, owners)):
        name = f"p{pi:03d}_s{res.seed}.png"
        data = _png_bytes(res.image)
        _atomic_write(out / "images" / name, data)
        entry = {"file": f"images/{name}", "prompt": res.prompt, "seed": res.seed,
                 "sha256": _sha256(data)}
        if res.focus_mask is not None:
            entry["mask_density"] = res.focus_mask.masked_fraction()
        images.append(entry)
        if "graph" in records[pi]:
            pairs.append({"image": f"images/{name}", "prompt": res.prompt,
                          "graph": records[pi]["graph"],
                          "adversarial_graph": records[pi]["adversarial_graph"]})
        if args.dump_attention:
            A = aggregate_attention(res.focused_record or res.record)
            arrays = {"attention": (A.A_star.numpy(), A.hw)}
            if res.focus_mask is not None:
                arrays["mask"] = (np.isfinite(res.focus_mask.mask.numpy()).astype(np.float32),
                                  res.focus_mask.hw)
            write_dump(out / "attention" / name[:-4], bundles[k].token_strings, arrays,
                       {"attention": {"mode": mode, "prompt": res.prompt, "seed": res.seed}})
    if pairs:
        _atomic_write(out / "pairs.jsonl", "".join(json.dumps(p) + "\n" for p in pairs).encode())
    _write_json(out / "manifest.json", {"config": run_cfg, "config_hash": config_hash(run_cfg),
                                        "images": images})
    print(json.dumps({"images": len(images), "out": str(out), "config_hash": config_hash(run_cfg)}))
    return 0


def _read_pairs(path: Path) -> List[dict]:
    from .graph import EvalGraph

    if not path.exists():
        raise DataError(f"pair file {path} not found")
    pairs = []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            pairs.append({"image": d["image"], "prompt": d.get("prompt", ""),
                          "graph": EvalGraph.from_dict(d["graph"]),
                          "adversarial_graph": EvalGraph.from_dict(d["adversarial_graph"])})
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{path}:{i + 1}: bad pair record ({e})") from e
    return pairs


def cmd_evaluate(args) -> int:
    from .epvit import EPViT, score_graphs

    pairs = _read_pairs(Path(args.pairs))
    if not pairs:
        raise UsageError(f"pair file {args.pairs} is empty")
    model = EPViT.load(resolve_checkpoint(args.epvit, "epvit"))
    sets, missing, all_rows = [], [], []
    for d in args.images:
        d = Path(d)
        ok, imgs = [], []
        for p in pairs:
            f = d / p["image"]
            if f.exists():
                ok.append(p)
                imgs.append(_read_png(f))
            else:
                missing.append(str(f))
        if not ok:
            sets.append({"images": str(d), "n": 0, "accuracy": None})
            continue
        imgs = np.stack(imgs)
        sc = score_graphs(imgs, [p["graph"] for p in ok], model)
        sa = score_graphs(imgs, [p["adversarial_graph"] for p in ok], model)
        wins = [c > a for c, a in zip(sc, sa)]
        rows = [{"images": str(d), "image": p["image"], "prompt": p["prompt"], "correct_score": c,
                 "adversarial_score": a, "win": w} for p, c, a, w in zip(ok, sc, sa, wins)]
        all_rows += rows
        sets.append({"images": str(d), "n": len(ok), "accuracy": 100.0 * sum(wins) / len(ok)})
    accs = [s["accuracy"] for s in sets if s["accuracy"] is not None]
    per_prompt: Dict[str, List[bool]] = {}
    for r in all_rows:
        per_prompt.setdefault(r["prompt"], []).append(r["win"])
    report = {
        "accuracy": float(np.mean(accs)) if accs else None,
        "seed_sets": sets,
        "per_prompt": {k: 100.0 * sum(v) / len(v) for k, v in sorted(per_prompt.items())},
        "pairs": all_rows,
        "missing": missing,
    }
    if len(accs) > 1:
        report["accuracy_mean"] = float(np.mean(accs))
        report["accuracy_std"] = float(np.std(accs, ddof=1))
    _write_json(Path(args.out), report)
    print(json.dumps({"accuracy": report["accuracy"], "missing": len(missing)}))
    if missing:
        return 2
    return 0


def sweep_thresholds(model, pairs, thresholds: Sequence[float], seeds: Sequence[int],
                     disclip: bool = False, steps=None, guidance=None, early_stop: float = 0.1,
                     epvit=None) -> List[dict]:
    """One metrics row for baseline plus one per threshold; failures are recorded."""
    from .epvit import epvit_accuracy
    from .pipeline import evaluate_binding

    def run(mode, s):
        rep, results = evaluate_binding(model, pairs, seeds, mode, s, disclip, early_stop, steps,
                                        guidance)
        row = rep.row()
        if epvit is not None:
            graphs, advs = [], []
            for p in pairs:
                graphs += [p.graph] * len(seeds) + [p.adversarial_graph] * len(seeds)
                advs += [p.adversarial_graph] * len(seeds) + [p.graph] * len(seeds)
            row["epvit_accuracy"] = epvit_accuracy(np.stack([r.image for r in results]),
                                                   graphs, advs, epvit)
        return row, results

    rows = []
    base, base_results = run("baseline", 0.0)
    rows.append(dict(base, mode="baseline", s="", status="ok"))
    for s in thresholds:
        try:
            row, results = run("fca", s)
            row["identical_to_baseline"] = all(
                np.array_equal(a.image, b.image) for a, b in zip(results, base_results))
            rows.append(dict(row, mode="fca", s=s, status="ok"))
        except Exception as e:  # keep sweeping
            log.error("threshold %s failed: %s", s, e)
            rows.append({"mode": "fca", "s": s, "status": f"error: {type(e).__name__}: {e}"})
    return rows


def plot_sweep(rows: List[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r["mode"] == "fca" and r["status"] == "ok"]
    base = next(r for r in rows if r["mode"] == "baseline")
    key = "epvit_accuracy" if "epvit_accuracy" in base else "both_correct"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["s"] for r in ok], [r[key] for r in ok], "o-", label="FCA")
    ax.axhline(base[key], color="gray", ls="--", label="baseline")
    ax.set_xlabel("threshold s")
    ax.set_ylabel(key.replace("_", " ") + " (%)")
    ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    _atomic_write(path, buf.getvalue())


def cmd_sweep_threshold(args) -> int:
    from .benchgen import benchmark_pairs
    from .epvit import EPViT

    thresholds = _floats(args.thresholds)
    if len(thresholds) < 2:
        raise UsageError("need at least two threshold values")
    model = _load_diffusion(args.checkpoint)
    pairs = read_benchmark(Path(args.benchmark)) if args.benchmark else benchmark_pairs()
    pairs = pairs[: args.n_pairs] if args.n_pairs else pairs
    epvit = EPViT.load(resolve_checkpoint(args.epvit, "epvit")) if args.epvit else None
    out = _prepare_out(Path(args.out), args.overwrite)
    rows = sweep_thresholds(model, pairs, thresholds, _ints(args.seeds), args.disclip, args.steps,
                            args.guidance, args.early_stop, epvit)
    cols = ["mode", "s", "status", "n", "both_correct", "one_correct", "leakage", "mask_density",
            "identical_to_baseline"] + (["epvit_accuracy"] if epvit is not None else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    _atomic_write(out / "sweep.csv", buf.getvalue().encode())
    plot_sweep(rows, out / "sweep.png")
    _write_json(out / "sweep.json", rows)
    print(json.dumps({"rows": len(rows), "out": str(out)}))
    return 0 if all(r["status"] == "ok" for r in rows) else 2


def render_heatmaps(dumps: Dict[str, Path], path: Path) -> int:
    """One row per run, one heatmap per token; returns the number of heatmaps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .fca import read_dump

    loaded = {}
    for label, d in dumps.items():
        manifest, arrays = read_dump(d)
        if "attention" not in arrays:
            raise DataError(f"dump {d} has no attention entry")
        e = next(e for e in manifest["entries"] if e["name"] == "attention")
        loaded[label] = (manifest["tokens"], arrays["attention"], tuple(e["hw"]))
    n_tok = max(a.shape[1] for _, a, _ in loaded.values())
    fig, axes = plt.subplots(len(loaded), n_tok, figsize=(1.3 * n_tok, 1.5 * len(loaded)),
                             squeeze=False)
    count = 0
    for r, (label, (tokens, A, hw)) in enumerate(loaded.items()):
        for c in range(n_tok):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c >= A.shape[1]:
                ax.axis("off")
                continue
            ax.imshow(A[:, c].reshape(hw), cmap="viridis")
            ax.set_title(tokens[c], fontsize=7)
            count += 1
        axes[r, 0].set_ylabel(label, fontsize=8)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110)
    plt.close(fig)
    _atomic_write(path, buf.getvalue())
    return count


def cmd_dump_attention(args) -> int:
    dumps = {}
    if args.baseline:
        dumps["baseline"] = Path(args.baseline)
    if args.fca_dump:
        dumps["fca"] = Path(args.fca_dump)
    if not dumps:
        raise UsageError("give --baseline and/or --fca-dump")
    for d in dumps.values():
        if not (d / "manifest.json").exists():
            raise DataError(f"no attention dump at {d}")
    n = render_heatmaps(dumps, Path(args.out))
    print(json.dumps({"heatmaps": n, "out": args.out}))
    return 0


def cmd_make_benchmark(args) -> int:
    from .benchgen import benchmark_pairs, shapes_corpus, synth_shapes_dataset

    if args.corpus:
        p = Path(args.corpus)
        if not p.exists():
            raise DataError(f"corpus {p} not found")
        try:
            corpus = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"corpus {p} is not valid JSON ({e})") from e
    else:
        corpus = shapes_corpus(synth_shapes_dataset(size=args.corpus_size, seed=args.seed))
    pairs = benchmark_pairs(args.n, args.min_cooccurrence, corpus)
    lines = [json.dumps({"sentence": p.sentence, "adversarial_sentence": p.adversarial_sentence,
                         "graph": p.graph.to_dict(), "adversarial_graph": p.adversarial_graph.to_dict()})
             for p in pairs]
    _atomic_write(Path(args.out), "".join(l + "\n" for l in lines).encode())
    print(json.dumps({"pairs": len(pairs), "out": args.out}))
    return 0


def cmd_make_dataset(args) -> int:
    from .benchgen import save_dataset, synth_shapes_dataset

    out = _prepare_out(Path(args.out), args.overwrite)
    samples = synth_shapes_dataset(size=args.size, seed=args.seed)
    save_dataset(samples, out)
    print(json.dumps({"samples": len(samples), "out": str(out)}))
    return 0


def _dataset(args):
    from .benchgen import load_dataset, synth_shapes_dataset

    if args.dataset:
        p = Path(args.dataset)
        if not (p / "metadata.jsonl").exists():
            raise DataError(f"no dataset at {p}")
        return load_dataset(p)
    return synth_shapes_dataset(size=args.size, seed=args.seed, same_color=args.same_color)


def cmd_train_diffusion(args) -> int:
    from .diffusion import DenoiserConfig, train_toy_diffusion

    from .similarity import SimilarityModel

    cfg = DenoiserConfig(channels=tuple(_ints(args.channels)), beta_schedule=args.beta_schedule,
                         beta_start=args.beta_start, beta_end=args.beta_end,
                         mid_self_attn=not args.no_self_attn)
    text = None
    if args.text_from:
        text = SimilarityModel.load(resolve_checkpoint(args.text_from, "similarity")).text

    def snapshot(step, loss, ema):
        if args.save_every and (step + 1) % args.save_every == 0 and step + 1 < args.train_steps:
            ema.save(Path(args.out) / "snapshots" / f"step{step + 1:06d}", {"train_steps": step + 1})

    t0 = time.time()
    model = train_toy_diffusion(_dataset(args), cfg, steps=args.train_steps, batch_size=args.batch_size,
                                lr=args.lr, seed=args.seed, amp=args.amp, text_encoder=text,
                                ground_weight=args.ground_weight, callback=snapshot)
    model.save(args.out, {"train_steps": args.train_steps, "seed": args.seed,
                          "final_loss": model.history[-1][1], "train_seconds": round(time.time() - t0),
                          "ground_weight": args.ground_weight,
                          "same_color": args.same_color, "text_from": args.text_from})
    print(json.dumps({"out": args.out, "final_loss": model.history[-1][1]}))
    return 0


def cmd_train_epvit(args) -> int:
    from .epvit import train_epvit

    text = _load_diffusion(args.text_from).text if args.text_from else None
    t0 = time.time()
    model = train_epvit(_dataset(args), steps=args.train_steps, batch_size=args.batch_size, lr=args.lr,
                        seed=args.seed, text_encoder=text)
    model.save(args.out, {"train_steps": args.train_steps, "seed": args.seed,
                          "train_seconds": round(time.time() - t0)})
    print(json.dumps({"out": args.out, "alpha": model.inject.alpha.item()}))
    return 0


def cmd_train_similarity(args) -> int:
    from .similarity import train_similarity

    model = train_similarity(_dataset(args), steps=args.train_steps, batch_size=args.batch_size,
                             lr=args.lr, seed=args.seed)
    model.save(args.out)
    print(json.dumps({"out": args.out}))
    return 0


# -- argument parsing ----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="focusbind", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="key = value file standing in for flags")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def gen_opts(sp):
        sp.add_argument("--checkpoint", help=f"diffusion checkpoint (default ${CHECKPOINT_ENV}/diffusion)")
        sp.add_argument("--steps", type=int, default=DEFAULTS["steps"])
        sp.add_argument("--guidance", type=float, default=DEFAULTS["guidance"])
        sp.add_argument("--early-stop", type=float, default=DEFAULTS["early_stop"])
        sp.add_argument("--disclip", action="store_true")
        sp.add_argument("--seeds", default="0,1,2")
        sp.add_argument("--overwrite", action="store_true")

    g = sub.add_parser("generate", help="generate images for prompts")
    g.add_argument("--prompt", action="append")
    g.add_argument("--prompt-file")
    g.add_argument("--parse-file")
    g.add_argument("--threshold", type=float, default=DEFAULTS["threshold"])
    g.add_argument("--fca", action="store_true")
    g.add_argument("--dump-attention", action="store_true")
    g.add_argument("--out", required=True)
    gen_opts(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="EPViT accuracy over generated images")
    e.add_argument("--images", action="append", required=True,
                   help="image directory; repeat once per seed set")
    e.add_argument("--pairs", required=True)
    e.add_argument("--epvit")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep-threshold", help="binding metrics across FCA thresholds")
    s.add_argument("--thresholds", default="0,0.25,0.5,0.75,0.9,1.0")
    s.add_argument("--benchmark")
    s.add_argument("--n-pairs", type=int)
    s.add_argument("--epvit")
    s.add_argument("--out", required=True)
    gen_opts(s)
    s.set_defaults(func=cmd_sweep_threshold)

    d = sub.add_parser("dump-attention", help="render per-token attention heatmaps")
    d.add_argument("--baseline")
    d.add_argument("--fca-dump")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_attention)

    b = sub.add_parser("make-benchmark", help="mine adversarial prompt pairs")
    b.add_argument("--corpus")
    b.add_argument("--corpus-size", type=int, default=2000)
    b.add_argument("--n", type=int, default=100)
    b.add_argument("--min-cooccurrence", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_make_benchmark)

    m = sub.add_parser("make-dataset", help="render the synthetic shapes corpus")
    m.add_argument("--size", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.add_argument("--overwrite", action="store_true")
    m.set_defaults(func=cmd_make_dataset)

    def train_opts(sp, steps, lr, same_color=0.0):
        sp.add_argument("--dataset")
        sp.add_argument("--size", type=int, default=20000)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--same-color", type=float, default=same_color,
                        help="share of generated scenes whose two shapes share a colour")
        sp.add_argument("--train-steps", type=int, default=steps)
        sp.add_argument("--batch-size", type=int, default=64)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train-diffusion", help="train the toy denoiser")
    train_opts(t, 10000, 1e-3, same_color=0.3)
    t.add_argument("--channels", default="32,64,96")
    t.add_argument("--no-self-attn", action="store_true", help="drop the bottleneck self-attention")
    t.add_argument("--ground-weight", type=float, default=0.05,
                   help="weight of the noun-grounding attention loss (0 disables it)")
    t.add_argument("--save-every", type=int, default=0, help="also snapshot the EMA model every N steps")
    t.add_argument("--text-from", help="similarity checkpoint whose text tower is copied in and frozen")
    t.add_argument("--beta-schedule", default="scaled_linear", choices=("linear", "scaled_linear"))
    t.add_argument("--beta-start", type=float, default=0.00085)
    t.add_argument("--beta-end", type=float, default=0.012)
    t.add_argument("--amp", action="store_true", help="bfloat16 autocast on CPU")
    t.set_defaults(func=cmd_train_diffusion)

    v = sub.add_parser("train-epvit", help="train the edge-prediction evaluator")
    train_opts(v, 4000, 1e-3)
    v.add_argument("--text-from", help="diffusion checkpoint whose text encoder names objects")
    v.set_defaults(func=cmd_train_epvit)

    c = sub.add_parser("train-similarity", help="train the whole-caption similarity baseline")
    train_opts(c, 2000, 1e-3, same_color=0.3)
    c.set_defaults(func=cmd_train_similarity)
    return p


def read_config_file(path: Path) -> List[str]:
    """Turn ``key = value`` lines into flag tokens to place before real flags."""
    if not path.exists():
        raise DataError(f"config file {path} not found")
    argv = []
    for i, line in enumerate(path.read_text().splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i + 1}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            argv.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        elif key in ("prompt", "images"):
            for v in value.split("|"):
                argv += [flag, v.strip()]
        else:
            argv += [flag, value]
    return argv


def _expand_config(argv: List[str]) -> List[str]:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return argv
    extra = read_config_file(Path(known.config))
    # the subcommand must come first; config flags go right after it so real flags win
    cmds = {"generate", "evaluate", "sweep-threshold", "dump-attention", "make-benchmark",
            "make-dataset", "train-diffusion", "train-epvit", "train-similarity"}
    for i, tok in enumerate(rest):
        if tok in cmds:
            return rest[:i + 1] + extra + rest[i + 1:]
    raise UsageError("missing command")


def _exit_code(exc: BaseException) -> int:
    from .epvit import LabelError
    from .fca import MaskError
    from .syntax import AbstractionError, ParseError, ParseSchemaError
    from .tokenizer import TokenizationError

    if isinstance(exc, UsageError):
        return 1
    data = (DataError, FileNotFoundError, json.JSONDecodeError, ParseError, ParseSchemaError,
            AbstractionError, TokenizationError, MaskError, LabelError)
    return 2 if isinstance(exc, data) else 3


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = None
    try:
        argv = _expand_config(argv)
        if any(a in ("-h", "--help") for a in argv):
            try:
                build_parser().parse_args(argv)
            except SystemExit as e:
                return int(e.code or 0)
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = getattr(args, "out", None)
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if code == 3:
            log.exception("internal error")
        print(json.dumps(record), file=sys.stderr)
        if out and Path(out).is_dir():
            try:
                _write_json(Path(out) / "error.json", record)
            except OSError:
                pass
        return code


if __name__ == "__main__":
    sys.exit(main())
