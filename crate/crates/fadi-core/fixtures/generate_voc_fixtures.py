#!/usr/bin/env python3
"""Regenerates the VOC Lin-similarity fixtures from the committed hypernym
extract (voc_taxonomy.tsv).

The extract pins one hypernym path per VOC class name, with corpus-style
occurrence counts. Information content is IC(c) = -ln(cum(c)/total), where
cum(c) sums the own counts of c and all of its descendants (each counted
once). Pair similarity is Lin's measure, 2*IC(lcs)/(IC(a)+IC(b)), with the
lowest common subsumer being the common ancestor of maximum IC (ties break
toward the lexicographically smallest id).

Word-level similarity between two class names is the maximum over their
sense pairs. Most names carry a single sense; `bus` also names an old,
unreliable car, a sense subsumed by `car`, which is why the word-level
bus/car similarity sits far above the vehicle-hierarchy value.

This script is deliberately independent of the Rust implementation; it is
the reference the shipped CSVs were produced with.

Usage:
    python3 generate_voc_fixtures.py          # rewrite the CSV fixtures
    python3 generate_voc_fixtures.py --check  # verify files match
"""

import argparse
import math
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))

VOC = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
]

SPLITS = {
    1: ["bird", "bus", "cow", "motorbike", "sofa"],
    2: ["aeroplane", "bottle", "cow", "horse", "sofa"],
    3: ["boat", "cat", "motorbike", "sheep", "sofa"],
}

# Sense inventory per class name; similarity takes the max over sense pairs.
SENSES = {"bus": ["bus", "jalopy"]}


def load_taxonomy(path):
    parents, own = {}, {}
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            node, parent_field, count = line.split("\t")
            parents[node] = [p for p in parent_field.split(",") if p]
            own[node] = int(count)
    children = {n: [] for n in parents}
    for n, ps in parents.items():
        for p in ps:
            children[p].append(n)
    return parents, children, own


def cumulative_counts(parents, children, own):
    cum = {}
    for node in parents:
        seen, stack, total = set(), [node], 0
        while stack:
            x = stack.pop()
            if x in seen:
                continue
            seen.add(x)
            total += own[x]
            stack.extend(children[x])
        cum[node] = total
    return cum


class Extract:
    def __init__(self, path):
        self.parents, children, own = load_taxonomy(path)
        self.cum = cumulative_counts(self.parents, children, own)
        roots = [n for n, ps in self.parents.items() if not ps]
        assert len(roots) == 1, roots
        self.total = self.cum[roots[0]]

    def ic(self, node):
        assert self.cum[node] > 0, node
        return -math.log(self.cum[node] / self.total)

    def ancestors(self, node):
        out, stack = set(), [node]
        while stack:
            x = stack.pop()
            if x not in out:
                out.add(x)
                stack.extend(self.parents[x])
        return out

    def lcs(self, a, b):
        common = self.ancestors(a) & self.ancestors(b)
        return min(common, key=lambda n: (-self.ic(n), n))

    def lin(self, a, b):
        denom = self.ic(a) + self.ic(b)
        if denom == 0.0:
            return 1.0 if a == b else 0.0
        return 2.0 * self.ic(self.lcs(a, b)) / denom

    def word_lin(self, a, b):
        return max(
            self.lin(x, y)
            for x in SENSES.get(a, [a])
            for y in SENSES.get(b, [b])
        )


def render_matrix(extract, rows, cols):
    lines = ["," + ",".join(cols)]
    for r in rows:
        cells = [repr(extract.word_lin(r, c)) for c in cols]
        lines.append(r + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def fixture_files(extract):
    files = {"voc_lin_full.csv": render_matrix(extract, VOC, VOC)}
    for split, novels in SPLITS.items():
        bases = [c for c in VOC if c not in novels]
        files[f"voc_split{split}.csv"] = render_matrix(extract, novels, bases)
    return files


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--check", action="store_true", help="verify instead of writing")
    args = parser.parse_args()

    extract = Extract(os.path.join(HERE, "voc_taxonomy.tsv"))

    # sanity: symmetry and range over the full matrix
    for a in VOC:
        for b in VOC:
            s = extract.word_lin(a, b)
            assert 0.0 <= s <= 1.0, (a, b, s)
            assert s == extract.word_lin(b, a), (a, b)
        assert extract.word_lin(a, a) == 1.0, a

    failures = 0
    for name, content in fixture_files(extract).items():
        path = os.path.join(HERE, name)
        if args.check:
            with open(path) as fh:
                if fh.read() != content:
                    print(f"MISMATCH: {name}")
                    failures += 1
                else:
                    print(f"ok: {name}")
        else:
            with open(path, "w") as fh:
                fh.write(content)
            print(f"wrote {name}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
