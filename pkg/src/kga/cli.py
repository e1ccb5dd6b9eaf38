"""Command line entry point: ``kga <subcommand> [options]``.

Subcommands: ingest, train, ask, bench, recall-eval, trace. Every option can
also come from ``--config FILE`` (JSON object or ``key = value`` lines, keys
spelled like the long option with ``-`` or ``_``); command line flags win.
Each run writes ``manifest.json`` (resolved settings, seed, model checksum,
output files) into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .fusion import FusionConfig, kga_generate
from .harness import (DEFAULT_ALPHAS, ICL_CAP, MODES, Runtime, recall_report, run_pipeline,
                      trace_records)
from .kg import KnowledgeGraph, ingest_tsv, link_entity, retrieve_candidates
from .model import Model, ModelConfig
from .synth import QAInstance, gen_synthetic_kgqa, to_training_sequence
from .trace import export_trace
from .train import train_lm
from .vocab import Vocab

log = logging.getLogger("kga")

# settings that have a built-in default; anything else defaults to None
DEFAULTS = {
    "out": ".",
    "seed": 0,
    "k": 3,
    "aggregation": "mean",
    "layer": None,
    "bypass": False,
    "hops": 1,
    "max_new": 4,
    "mode": "kga",
    "icl_cap": ICL_CAP,
    "alphas": ",".join(f"{a:g}" for a in DEFAULT_ALPHAS),
    "limit": 0,
    # synthetic data and training
    "n_entities": 400,
    "n_relations": 20,
    "n_facts": 1600,
    "n_questions": 500,
    "hop": 2,
    "n_train": 20000,
    "max_context": 8,
    "judge_fraction": 0.5,
    "min_pool": 0,
    "layers": 2,
    "dim": 64,
    "heads": 4,
    "ffn": 256,
    "max_seq_len": 512,
    "steps": 4000,
    "lr": 3e-3,
    "batch": 32,
}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Parse a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: JSON config must be an object")
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _coerce(key: str, value):
    """Convert config-file strings to the type of the built-in default."""
    default = DEFAULTS.get(key)
    if not isinstance(value, str) or default is None or isinstance(default, str):
        return value
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {value!r}") from None


def resolve(args: argparse.Namespace, keys) -> dict:
    """Built-in defaults, then the config file, then explicit flags."""
    conf = read_config(args.config) if args.config else {}
    out = {}
    for key in keys:
        value = DEFAULTS.get(key)
        if key in conf:
            value = _coerce(key, conf[key])
        flag = getattr(args, key, None)
        if flag is not None:
            value = flag
        out[key] = value
    return out


def _need(settings: dict, *keys):
    for key in keys:
        if settings.get(key) in (None, ""):
            raise UsageError(f"missing required setting --{key.replace('_', '-')}")
        if key in ("tsv", "kg", "checkpoint", "vocab", "instances", "config"):
            if not Path(settings[key]).exists():
                raise FileNotFoundError(f"{settings[key]}: no such file")


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(command: str, settings: dict, out_dir: Path, outputs, checksum=None):
    manifest = dict(command=command, seed=settings.get("seed"), model_checksum=checksum,
                    config={k: v for k, v in sorted(settings.items()) if k != "out"},
                    outputs=sorted(Path(p).name for p in outputs))
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fusion(s: dict) -> FusionConfig:
    return FusionConfig(k=s["k"], score_aggregation=s["aggregation"], layer=s["layer"],
                        selection_bypass=bool(s["bypass"]))


def _vocab_path(s: dict) -> Path:
    return Path(s["vocab"]) if s.get("vocab") else Path(s["checkpoint"]).with_suffix(".vocab")


def _load_runtime(s: dict):
    _need(s, "checkpoint", "kg")
    vocab_path = _vocab_path(s)
    if not vocab_path.exists():
        raise FileNotFoundError(f"{vocab_path}: no such file (pass --vocab)")
    before = file_checksum(s["checkpoint"])
    model = Model.load(s["checkpoint"])
    rt = Runtime(model, Vocab.load(vocab_path), ingest_tsv(s["kg"]))
    return rt, before


def load_instances(path, kg: KnowledgeGraph, hops: int) -> list[QAInstance]:
    """JSON list of instances; missing candidate lists are retrieved from ``kg``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for i, item in enumerate(raw):
        hop = int(item.get("hop", hops))
        cands = item.get("candidates")
        anchor = item.get("anchor", "")
        if cands is None:
            anchor, _ = link_entity(item["question"], kg)
            cands = retrieve_candidates(anchor, kg, hop)
        out.append(QAInstance(int(item.get("id", i)), item["question"], item["answer"],
                              list(item.get("gold", [])), list(cands), anchor, hop))
    return out


def _instances(s: dict, rt: Runtime):
    _need(s, "instances")
    inst = load_instances(s["instances"], rt.kg, s["hops"])
    return inst[: s["limit"]] if s["limit"] else inst


def _outdir(s: dict) -> Path:
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# subcommands

def cmd_ingest(s: dict) -> int:
    _need(s, "tsv")
    kg = ingest_tsv(s["tsv"])
    out = _outdir(s)
    graph = out / "graph.json"
    graph.write_text(kg.to_json() + "\n", encoding="utf-8")
    write_manifest("ingest", s, out, [graph])
    print(f"triples={len(kg)} entities={len(kg.entities)} malformed={kg.malformed}")
    return 0


def cmd_train(s: dict) -> int:
    out = _outdir(s)
    data = gen_synthetic_kgqa(s["seed"], s["n_entities"], s["n_relations"], s["n_facts"],
                              s["n_questions"], s["hop"], n_train=s["n_train"],
                              max_context=s["max_context"], min_pool=s["min_pool"],
                              judge_fraction=s["judge_fraction"])
    cfg = ModelConfig(s["layers"], s["dim"], s["heads"], s["ffn"], len(data.vocab),
                      s["max_seq_len"], s["seed"])
    corpus = [to_training_sequence(data.vocab, item) for item in data.corpus]
    model, losses = train_lm(Model.init(cfg), corpus, s["steps"], s["lr"], s["batch"],
                             seed=s["seed"], log_every=max(s["steps"] // 20, 1))
    paths = dict(model=out / "model.bin", vocab=out / "model.vocab", kg=out / "kg.tsv",
                 instances=out / "instances.json", losses=out / "losses.txt")
    model.save(paths["model"])
    data.vocab.save(paths["vocab"])
    data.kg.to_tsv(paths["kg"])
    paths["instances"].write_text(
        json.dumps([i.to_dict() for i in data.instances], indent=1) + "\n", encoding="utf-8")
    paths["losses"].write_text("".join(f"{x!r}\n" for x in losses), encoding="utf-8")
    write_manifest("train", s, out, paths.values(), model.checksum())
    final = float(np.mean(losses[-100:])) if losses else float("nan")
    print(f"steps={len(losses)} final_loss={final:.4f} model={paths['model']}")
    return 0


def cmd_ask(s: dict) -> int:
    _need(s, "question")
    rt, before = _load_runtime(s)
    anchor, sim = link_entity(s["question"], rt.kg)
    cands = retrieve_candidates(anchor, rt.kg, s["hops"])
    prompt = rt.prompt(s["question"])
    out_ids, selected, records = kga_generate(rt.model, prompt, rt.encodings(cands),
                                              _fusion(s), s["max_new"])
    lines = [f"answer: {rt.vocab.decode(out_ids)}",
             f"anchor: {anchor} (similarity {sim:.4f}), {len(cands)} candidates"]
    for tid in selected:
        lines.append(f"selected: {tid}\t{rt.kg.text(tid)}")
    for r in sorted(records, key=lambda r: (-r.score, r.triple_id)):
        per_layer = " ".join(f"{x:.6g}" for x in r.layer_scores)
        lines.append(f"score: {r.triple_id}\t{r.score:.6g}\t[{per_layer}]")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out = _outdir(s)
    answer = out / "answer.txt"
    answer.write_text(text, encoding="utf-8")
    _check_unchanged(s, before)
    write_manifest("ask", s, out, [answer], before)
    return 0


def cmd_bench(s: dict) -> int:
    if s["mode"] not in MODES:
        raise UsageError(f"--mode must be one of {', '.join(MODES)}")
    rt, before = _load_runtime(s)
    instances = _instances(s, rt)
    report, preds = run_pipeline(s["mode"], rt, instances, _fusion(s),
                                 icl_cap=s["icl_cap"] or None, max_new=s["max_new"],
                                 seed=s["seed"])
    out = _outdir(s)
    rep = out / f"bench-{s['mode']}.txt"
    rep.write_text(report.to_keyvalue(timing=False), encoding="utf-8")
    pred = out / f"predictions-{s['mode']}.jsonl"
    pred.write_text("".join(json.dumps(p, sort_keys=True) + "\n" for p in preds),
                    encoding="utf-8")
    sys.stdout.write(report.to_table())
    _check_unchanged(s, before)
    write_manifest("bench", s, out, [rep, pred], before)
    return 0


def _alphas(s: dict) -> list[float]:
    try:
        alphas = [float(a) for a in str(s["alphas"]).split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"--alphas: cannot parse {s['alphas']!r}") from None
    if not alphas or min(alphas) <= 0:
        raise UsageError("--alphas must be positive")
    return alphas


def cmd_recall_eval(s: dict) -> int:
    rt, before = _load_runtime(s)
    instances = _instances(s, rt)
    report = recall_report(rt, instances, _alphas(s), _fusion(s), seed=s["seed"])
    out = _outdir(s)
    rep = out / "recall.txt"
    rep.write_text(report.to_keyvalue(timing=False), encoding="utf-8")
    sys.stdout.write(report.to_table())
    _check_unchanged(s, before)
    write_manifest("recall-eval", s, out, [rep], before)
    return 0


def cmd_trace(s: dict) -> int:
    rt, before = _load_runtime(s)
    instances = _instances(s, rt)
    records = trace_records(rt, instances, _fusion(s))
    out = _outdir(s)
    paths = export_trace(records, out / "trace.tsv")
    print(f"records={len(records)} instances={len(instances)} files={len(paths)}")
    _check_unchanged(s, before)
    write_manifest("trace", s, out, paths, before)
    return 0


def _check_unchanged(s: dict, before: str) -> None:
    if file_checksum(s["checkpoint"]) != before:
        raise RuntimeError(f"{s['checkpoint']} changed during the run")


COMMON = ("out", "seed")
FUSION = ("k", "aggregation", "layer", "bypass")
MODEL = ("checkpoint", "vocab", "kg")
EVAL = MODEL + FUSION + ("instances", "hops", "limit")
COMMANDS = {
    "ingest": (cmd_ingest, COMMON + ("tsv",)),
    "train": (cmd_train, COMMON + ("n_entities", "n_relations", "n_facts", "n_questions",
                                   "hop", "n_train", "max_context", "judge_fraction",
                                   "min_pool", "layers", "dim", "heads", "ffn",
                                   "max_seq_len", "steps", "lr", "batch")),
    "ask": (cmd_ask, COMMON + MODEL + FUSION + ("question", "hops", "max_new")),
    "bench": (cmd_bench, COMMON + EVAL + ("mode", "icl_cap", "max_new")),
    "recall-eval": (cmd_recall_eval, COMMON + EVAL + ("alphas",)),
    "trace": (cmd_trace, COMMON + EVAL),
}

HELP = {
    "ingest": "parse a head<TAB>relation<TAB>tail file and report its size",
    "train": "generate synthetic KGQA data and train a model on it",
    "ask": "answer one question with fused triples",
    "bench": "answer a question set in one mode and report accuracy and cost",
    "recall-eval": "gold-triple recall of the three ranking strategies",
    "trace": "export per-layer triple scores",
}

_FLAG_TYPES = {
    "seed": int, "k": int, "layer": int, "hops": int, "max_new": int, "icl_cap": int,
    "limit": int, "n_entities": int, "n_relations": int, "n_facts": int, "n_questions": int,
    "hop": int, "n_train": int, "max_context": int, "judge_fraction": float, "min_pool": int,
    "layers": int, "dim": int, "heads": int, "ffn": int, "max_seq_len": int, "steps": int,
    "lr": float, "batch": int,
}
_CHOICES = {"aggregation": ("mean", "last", "layer"), "mode": MODES, "hops": (1, 2),
            "hop": (1, 2)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kga", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON or key=value settings file")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            if key == "bypass":
                p.add_argument(flag, action="store_true", default=None,
                               help="fuse every candidate without scoring")
                continue
            p.add_argument(flag, dest=key, type=_FLAG_TYPES.get(key, str),
                           choices=_CHOICES.get(key), default=None,
                           help=f"default: {DEFAULTS.get(key)}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func, keys = COMMANDS[args.command]
    try:
        settings = resolve(args, keys)
        return func(settings)
    except UsageError as exc:
        parser.exit(2, f"kga {args.command}: error: {exc}\n")
    except Exception as exc:  # one-line diagnostic instead of a traceback
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"kga {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
