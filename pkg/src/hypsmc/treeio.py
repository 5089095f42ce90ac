"""Newick, FASTA and minimal NEXUS readers and writers."""

from dataclasses import dataclass, field

import numpy as np

from . import evolution as evo


# -- newick ------------------------------------------------------------------

@dataclass
class NewickNode:
    name: str = ""
    children: list = field(default_factory=list)   # [(NewickNode, branch_length)]

    def leaves(self):
        if not self.children:
            return [self.name]
        out = []
        for child, _ in self.children:
            out.extend(child.leaves())
        return out

    def topo_key(self):
        if not self.children:
            return ("L", self.name)
        return ("I", tuple(sorted(c.topo_key() for c, _ in self.children)))


def parse_newick(text: str) -> NewickNode:
    text = text.strip()
    if text.endswith(";"):
        text = text[:-1]
    pos = [0]

    def parse_node():
        node = NewickNode()
        if text[pos[0]] == "(":
            pos[0] += 1
            while True:
                child = parse_node()
                length = 0.0
                if pos[0] < len(text) and text[pos[0]] == ":":
                    pos[0] += 1
                    start = pos[0]
                    while pos[0] < len(text) and text[pos[0]] not in ",()":
                        pos[0] += 1
                    length = float(text[start:pos[0]])
                node.children.append((child, length))
                if pos[0] < len(text) and text[pos[0]] == ",":
                    pos[0] += 1
                    continue
                break
            if pos[0] >= len(text) or text[pos[0]] != ")":
                raise ValueError("unbalanced parentheses in newick string")
            pos[0] += 1
        start = pos[0]
        while pos[0] < len(text) and text[pos[0]] not in ":,()":
            pos[0] += 1
        node.name = text[start:pos[0]].strip()
        return node

    root = parse_node()
    if pos[0] != len(text) and text[pos[0]] == ":":
        # root branch length; parse and discard
        float(text[pos[0] + 1:])
        pos[0] = len(text)
    if pos[0] != len(text):
        raise ValueError(f"trailing characters in newick string: {text[pos[0]:]!r}")
    return root


def format_newick(node: NewickNode) -> str:
    return _format_node(node) + ";"


def _format_node(node):
    if not node.children:
        return node.name
    # canonical child order by sorted taxon sets
    ordered = sorted(node.children, key=lambda cb: tuple(sorted(cb[0].leaves())))
    inner = ",".join(f"{_format_node(c)}:{b:.10g}" for c, b in ordered)
    return f"({inner})"


def clade_to_newick(clade: evo.Clade, taxa) -> NewickNode:
    if clade.taxon is not None:
        return NewickNode(taxa[clade.taxon])
    node = NewickNode()
    for child, beta in clade.children:
        node.children.append((clade_to_newick(child, taxa), float(beta)))
    return node


def write_newick(state_or_tree, path, taxa=None):
    """Serialize a full tree (single-root state or NewickNode) to a file."""
    if isinstance(state_or_tree, evo.PartialState):
        if len(state_or_tree.roots) != 1:
            raise ValueError("cannot serialize a forest with more than one root")
        tree = clade_to_newick(state_or_tree.roots[0], taxa)
    else:
        tree = state_or_tree
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_newick(tree) + "\n")


def newick_log_likelihood(tree: NewickNode, alignment: evo.Alignment,
                          rate: evo.RateMatrix, prior: evo.BranchPrior):
    """Felsenstein score plus branch prior for a parsed binary tree."""
    log_partials = evo.leaf_log_partials(alignment)
    index = {name: i for i, name in enumerate(alignment.taxa)}

    prior_total = [0.0]

    def partials(node):
        if not node.children:
            if node.name not in index:
                raise ValueError(f"tree leaf {node.name!r} not in alignment")
            return log_partials[index[node.name]]
        if len(node.children) != 2:
            raise ValueError("only binary trees are supported")
        (c1, b1), (c2, b2) = node.children
        prior_total[0] += float(evo.branch_log_prior(b1, prior.lambda_bl)
                                + evo.branch_log_prior(b2, prior.lambda_bl))
        return evo.merge_log_partials(partials(c1), partials(c2),
                                      evo.transition_matrix(rate.Q, b1),
                                      evo.transition_matrix(rate.Q, b2))

    root = partials(tree)
    loglik = float(evo.root_log_likelihood(root, rate.stationary))
    return loglik, prior_total[0]


# -- alignments --------------------------------------------------------------

def read_fasta(path) -> evo.Alignment:
    taxa, seqs = [], []
    current = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                taxa.append(line[1:].split()[0])
                seqs.append([])
                current = seqs[-1]
            else:
                if current is None:
                    raise ValueError("sequence data before first FASTA header")
                current.append(line)
    if not taxa:
        raise ValueError("empty FASTA file")
    return evo.Alignment.from_sequences(taxa, ["".join(s) for s in seqs])


def read_nexus(path) -> evo.Alignment:
    """Minimal NEXUS DATA/CHARACTERS matrix reader (interleaved or not)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    lower = text.lower()
    start = lower.find("matrix")
    if start < 0:
        raise ValueError("no matrix block in NEXUS file")
    end = text.find(";", start)
    if end < 0:
        raise ValueError("unterminated matrix block")
    body = text[start + len("matrix"):end]
    order, chunks = [], {}
    for line in body.splitlines():
        line = line.split("[")[0].strip()
        if not line:
            continue
        parts = line.split()
        name, seq = parts[0], "".join(parts[1:])
        if name not in chunks:
            order.append(name)
            chunks[name] = []
        chunks[name].append(seq)
    if not order:
        raise ValueError("empty NEXUS matrix")
    return evo.Alignment.from_sequences(
        order, ["".join(chunks[name]) for name in order])


def read_alignment(path, fmt="fasta") -> evo.Alignment:
    if fmt == "fasta":
        return read_fasta(path)
    if fmt == "nexus":
        return read_nexus(path)
    raise ValueError(f"unknown alignment format {fmt!r}")
