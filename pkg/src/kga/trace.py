"""Layer-wise triple score traces.

Trace file: one tab-separated record per line, ``instance triple layer
score``, preceded by a ``#``-comment header. Layers are 1-based and scores
are written with ``repr`` so they parse back exactly. Records are sorted by
``(instance, layer, triple)``.

Companion matrix ``<stem>.<instance>.csv``: one row per layer, one column
per triple, first column is the layer index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

HEADER = "# instance\ttriple\tlayer\tscore\n"


@dataclass(frozen=True, order=True)
class TraceRecord:
    instance: int
    layer: int
    triple: int
    score: float


def records_from_scores(instance: int, score_records) -> list[TraceRecord]:
    """Flatten per-layer scores of :class:`kga.fusion.TripleScoreRecord` objects."""
    out = []
    for rec in score_records:
        for l, s in enumerate(rec.layer_scores, start=1):
            out.append(TraceRecord(instance, l, rec.triple_id, float(s)))
    return out


def export_trace(records: Iterable[TraceRecord], path) -> list[Path]:
    """Write the trace file and one matrix per instance; returns written paths."""
    records = sorted(records)
    if not records:
        raise ValueError("no trace records to export")
    path = Path(path)
    written = [path]
    try:
        with path.open("w", encoding="utf-8") as fh:
            fh.write(HEADER)
            for r in records:
                fh.write(f"{r.instance}\t{r.triple}\t{r.layer}\t{r.score!r}\n")
        for inst in sorted({r.instance for r in records}):
            rows = [r for r in records if r.instance == inst]
            triples = sorted({r.triple for r in rows})
            layers = sorted({r.layer for r in rows})
            cell = {(r.layer, r.triple): r.score for r in rows}
            mpath = path.with_name(f"{path.stem}.{inst}.csv")
            lines = ["layer," + ",".join(f"t{t}" for t in triples)]
            for l in layers:
                lines.append(f"{l}," + ",".join(repr(cell.get((l, t), float("nan")))
                                                 for t in triples))
            mpath.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(mpath)
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc
    return written


def parse_trace(path) -> list[TraceRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        inst, triple, layer, score = line.split("\t")
        out.append(TraceRecord(int(inst), int(layer), int(triple), float(score)))
    return out


def score_matrix(records: Sequence[TraceRecord], instance: int):
    """``(layers, triples, rows)`` for one instance; ``rows[i][j]`` is the
    score of ``triples[j]`` at ``layers[i]``."""
    rows = [r for r in records if r.instance == instance]
    triples = sorted({r.triple for r in rows})
    layers = sorted({r.layer for r in rows})
    cell = {(r.layer, r.triple): r.score for r in rows}
    return layers, triples, [[cell[(l, t)] for t in triples] for l in layers]
