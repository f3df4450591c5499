"""Convert the raw Pubmed-Diabetes ``.tab`` files to the TSV layout of :mod:`colnet.relgraph`.

Usage::

    python3 -m colnet.pubmed RAW_DIR OUT_DIR

``RAW_DIR`` holds ``Pubmed-Diabetes.NODE.paper.tab`` and
``Pubmed-Diabetes.DIRECTED.cites.tab``. Features are the TF-IDF word weights,
absent words written as 0. Each citation becomes one ``uni`` tuple of the
relation ``cites`` from the first paper to the second; self-citations and
repeated pairs are dropped and counted.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .relgraph import EDGES_HEADER, LABELS_HEADER, NODES_HEADER_ID

NODE_FILE = "Pubmed-Diabetes.NODE.paper.tab"
CITES_FILE = "Pubmed-Diabetes.DIRECTED.cites.tab"


def read_papers(path):
    """Returns (feature names, [(paper id, label, {name: value})])."""
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        names = [f.split(":")[1] for f in fh.readline().split("\t") if f.startswith("numeric:")]
        papers = []
        for raw in fh:
            cols = raw.rstrip("\r\n").split("\t")
            if not cols[0]:
                continue
            values, label = {}, None
            for item in cols[1:]:
                key, _, val = item.partition("=")
                if key == "label":
                    label = val
                elif key != "summary" and key:
                    values[key] = val
            if label is None:
                raise ValueError(f"{path}: paper {cols[0]} has no label")
            papers.append((cols[0], label, values))
    return names, papers


def read_cites(path):
    """Returns [(citing id, cited id)] in file order."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        fh.readline()
        for raw in fh:
            cols = raw.split()
            if len(cols) < 4:
                continue
            pairs.append((cols[1].split(":", 1)[1], cols[3].split(":", 1)[1]))
    return pairs


def convert(raw_dir, out_dir) -> dict:
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    names, papers = read_papers(raw_dir / NODE_FILE)
    pairs = read_cites(raw_dir / CITES_FILE)
    out_dir.mkdir(parents=True, exist_ok=True)

    known = {pid for pid, _, _ in papers}
    with open(out_dir / "nodes.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join([NODES_HEADER_ID] + names) + "\n")
        for pid, _, values in papers:
            fh.write("\t".join([pid] + [values.get(n, "0") for n in names]) + "\n")
    with open(out_dir / "labels.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(LABELS_HEADER) + "\n")
        for pid, label, _ in papers:
            fh.write(f"{pid}\t{label}\n")

    seen, dropped = set(), {"self": 0, "repeat": 0, "unknown": 0}
    with open(out_dir / "edges.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(EDGES_HEADER) + "\n")
        for src, dst in pairs:
            if src not in known or dst not in known:
                dropped["unknown"] += 1
            elif src == dst:
                dropped["self"] += 1
            elif (src, dst) in seen:
                dropped["repeat"] += 1
            else:
                seen.add((src, dst))
                fh.write(f"{src}\t{dst}\tcites\tuni\n")
    return {"papers": len(papers), "features": len(names), "citations": len(pairs),
            "tuples": len(seen), "dropped": dropped}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m colnet.pubmed", description=__doc__.split("\n")[0])
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    args = p.parse_args(argv)
    try:
        stats = convert(args.raw_dir, args.out_dir)
    except (OSError, ValueError, IndexError) as exc:
        sys.stderr.write(f"colnet.pubmed: {exc}\n")
        return 1
    d = stats["dropped"]
    sys.stdout.write(f"{stats['papers']} papers, {stats['features']} features, "
                     f"{stats['tuples']} of {stats['citations']} citations kept "
                     f"(dropped {d['self']} self, {d['repeat']} repeated, {d['unknown']} unknown)\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
