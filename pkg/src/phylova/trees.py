"""Phylogenetic trees: Newick parsing, simulation, correlation/distance matrices, orderings.

Trees are rooted with nonnegative branch lengths. The species correlation
matrix is built from shared root-to-ancestor branch lengths, normalized so
the diagonal is exactly one, which also handles non-ultrametric trees.
All functions here are pure; nothing mutates a tree after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORDERING_METHODS = (
    "phylogeny-tips",
    "alphabetical",
    "sum-pairwise-distance",
    "root-distance",
    "first-eigenvector",
    "sum-squared-covariance",
    "identity",
)


class NewickError(ValueError):
    """Malformed Newick input; carries the character position of the problem."""

    def __init__(self, message, pos):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class TreeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PhyloTree:
    """Rooted tree as parallel node arrays.

    parent[i] is the node index of i's parent (-1 for the single root),
    length[i] the branch length from i to its parent (0.0 at the root),
    labels[i] the tip label (None on internal nodes). Tips are reported
    in left-to-right order as written/constructed.
    """

    parent: np.ndarray
    length: np.ndarray
    labels: tuple

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        length = np.asarray(self.length, dtype=np.float64)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "length", length)
        n = parent.size
        if length.size != n or len(self.labels) != n:
            raise TreeError("parent, length and labels must have equal size")
        roots = np.flatnonzero(parent < 0)
        if roots.size != 1:
            raise TreeError(f"tree must have exactly one root, found {roots.size}")
        if np.any(length < 0):
            raise TreeError("negative branch length")
        # Connectivity/acyclicity: walking parents from every node must reach
        # the root in at most n steps.
        for i in range(n):
            j, steps = i, 0
            while parent[j] >= 0:
                j = parent[j]
                steps += 1
                if steps > n:
                    raise TreeError("cycle detected in parent pointers")
        has_child = np.zeros(n, dtype=bool)
        has_child[parent[parent >= 0]] = True
        tip_ids = tuple(i for i in range(n) if not has_child[i])
        object.__setattr__(self, "_tip_ids", tip_ids)
        seen = set()
        for i in tip_ids:
            lab = self.labels[i]
            if not lab:
                raise TreeError(f"tip node {i} has no label")
            if lab in seen:
                raise TreeError(f"duplicate tip label {lab!r}")
            seen.add(lab)

    @property
    def n_tips(self):
        return len(self._tip_ids)

    @property
    def tip_ids(self):
        return self._tip_ids

    @property
    def tip_labels(self):
        return tuple(self.labels[i] for i in self._tip_ids)

    @property
    def root(self):
        return int(np.flatnonzero(self.parent < 0)[0])

    def children(self):
        """List of child-index lists, in node order (preserves tip order)."""
        kids = [[] for _ in range(self.parent.size)]
        for i, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(i)
        return kids

    def depths(self):
        """Root-to-node path length for every node."""
        n = self.parent.size
        out = np.zeros(n)
        # Parents may appear after children in node order; resolve iteratively.
        order = self._topo_order()
        for i in order:
            p = self.parent[i]
            if p >= 0:
                out[i] = out[p] + self.length[i]
        return out

    def _topo_order(self):
        """Node indices ordered so every parent precedes its children."""
        n = self.parent.size
        order, stack = [], [self.root]
        kids = self.children()
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(kids[v]))
        if len(order) != n:
            raise TreeError("tree is not connected")
        return order

    def newick(self):
        """Serialize to a Newick string; tips keep their stored order."""
        kids = self.children()

        def fmt(i):
            if not kids[i]:
                s = self.labels[i]
            else:
                s = "(" + ",".join(fmt(c) for c in kids[i]) + ")"
            if self.parent[i] >= 0:
                s += f":{float(self.length[i])!r}"
            return s

        return fmt(self.root) + ";"


@dataclass(frozen=True, eq=False)
class PhyloCorrelation:
    """Dense species correlation matrix with its tip-label index."""

    values: np.ndarray
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("correlation matrix must be square")
        if len(self.labels) != self.values.shape[0]:
            raise ValueError("label count must match matrix dimension")

    @property
    def n_species(self):
        return self.values.shape[0]

    def index_of(self, label):
        return self.labels.index(label)


@dataclass(frozen=True, eq=False)
class Ordering:
    """Permutation of species positions plus the method that produced it."""

    perm: np.ndarray
    method: str

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        object.__setattr__(self, "perm", perm)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError("ordering is not a permutation")


def parse_newick(text):
    """Parse a single Newick tree string into a PhyloTree.

    Branch lengths are required on all edges except optionally the root.
    Raises NewickError naming the character position for malformed input.
    """
    if not isinstance(text, str):
        raise TypeError("expected a string")
    s = text.strip()
    if not s:
        raise NewickError("empty input", 0)

    parents, lengths, labels = [], [], []
    tip_positions = {}

    def new_node():
        parents.append(-1)
        lengths.append(0.0)
        labels.append(None)
        return len(parents) - 1

    pos = 0
    n = len(s)

    def peek():
        return s[pos] if pos < n else ""

    def read_label():
        nonlocal pos
        start = pos
        while pos < n and s[pos] not in "(),:;":
            pos += 1
        return s[start:pos].strip(), start

    def read_length(node):
        nonlocal pos
        if peek() != ":":
            return False
        pos += 1
        start = pos
        while pos < n and s[pos] not in "(),:;":
            pos += 1
        tok = s[start:pos].strip()
        try:
            val = float(tok)
        except ValueError:
            raise NewickError(f"invalid branch length {tok!r}", start) from None
        if val < 0:
            raise NewickError(f"negative branch length {tok!r}", start)
        lengths[node] = val
        return True

    def parse_clade():
        nonlocal pos
        node = new_node()
        if peek() == "(":
            open_pos = pos
            pos += 1
            while True:
                child = parse_clade()
                parents[child] = node
                if peek() == ",":
                    pos += 1
                    continue
                if peek() == ")":
                    pos += 1
                    break
                raise NewickError("unbalanced parentheses", open_pos)
            lab, _ = read_label()  # optional internal label
            labels[node] = lab or None
        else:
            lab, start = read_label()
            if not lab:
                raise NewickError("expected a tip label", start)
            if lab in tip_positions:
                raise NewickError(f"duplicate tip label {lab!r}", start)
            tip_positions[lab] = start
            labels[node] = lab
        read_length(node)
        return node

    root = parse_clade()
    if peek() != ";":
        raise NewickError("expected ';' after tree", pos)
    if pos != n - 1:
        raise NewickError("trailing content after ';'", pos + 1)
    parents[root] = -1
    lengths[root] = 0.0
    return PhyloTree(np.array(parents), np.array(lengths), tuple(labels))


def read_newick_file(path):
    """Read a single UTF-8 Newick tree from a file."""
    with open(path, encoding="utf-8") as fh:
        return parse_newick(fh.read())


def write_newick_file(tree, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(tree.newick() + "\n")


def shared_branch_matrix(tree):
    """Shared root-to-common-ancestor branch length for every tip pair.

    Entry (j, l) sums the branch lengths of every edge that lies on both
    root-to-tip paths; the diagonal is the root-to-tip depth.
    """
    m = tree.n_tips
    tip_pos = {node: k for k, node in enumerate(tree.tip_ids)}
    kids = tree.children()
    S = np.zeros((m, m))
    # Post-order accumulation of tip descendants per node; each non-root
    # edge contributes its length to all pairs of tips below it.
    order = tree._topo_order()
    below = [None] * tree.parent.size
    for v in reversed(order):
        if not kids[v]:
            below[v] = [tip_pos[v]]
        else:
            acc = []
            for c in kids[v]:
                acc.extend(below[c])
            below[v] = acc
        if tree.parent[v] >= 0 and tree.length[v] > 0:
            ix = np.asarray(below[v])
            S[np.ix_(ix, ix)] += tree.length[v]
    return S


def correlation_matrix(tree):
    """Species correlation from normalized shared branch lengths.

    Unit diagonal by construction; raises TreeError if any tip has zero
    root-to-tip depth (the normalization would be undefined).
    """
    S = shared_branch_matrix(tree)
    depths = np.diag(S).copy()
    if np.any(depths <= 0):
        bad = [tree.tip_labels[i] for i in np.flatnonzero(depths <= 0)]
        raise TreeError(f"tips with zero root-to-tip depth: {bad}")
    C = S / np.sqrt(np.outer(depths, depths))
    np.fill_diagonal(C, 1.0)
    return PhyloCorrelation(C, tree.tip_labels)


def evolutionary_distances(tree):
    """Patristic distances between tips: path length along the tree."""
    S = shared_branch_matrix(tree)
    depths = np.diag(S)
    return depths[:, None] + depths[None, :] - 2.0 * S


def ordering(C, tree, method):
    """Permutation of species positions by one of the supported heuristics.

    Positions index into C's labels (tree tip order). Ties are broken by
    original position (stable).
    """
    if method not in ORDERING_METHODS:
        raise ValueError(f"unknown ordering method {method!r}; choose from {ORDERING_METHODS}")
    m = C.n_species
    if tree is not None and set(tree.tip_labels) != set(C.labels):
        raise ValueError("correlation matrix and tree do not share a tip set")
    if method in ("phylogeny-tips", "identity"):
        # C's index already is tree tip order; both keep it.
        perm = np.arange(m)
    elif method == "alphabetical":
        perm = np.array(sorted(range(m), key=lambda i: C.labels[i]))
    elif method == "sum-pairwise-distance":
        d = evolutionary_distances(tree)
        perm = np.argsort(d.sum(axis=1), kind="stable")
    elif method == "root-distance":
        depths = np.diag(shared_branch_matrix(tree))
        perm = np.argsort(depths, kind="stable")
    elif method == "first-eigenvector":
        w, v = np.linalg.eigh(C.values)
        vec = v[:, -1]
        nz = np.flatnonzero(np.abs(vec) > 1e-12)
        if nz.size and vec[nz[0]] < 0:
            vec = -vec
        perm = np.argsort(vec, kind="stable")
    elif method == "sum-squared-covariance":
        perm = np.argsort((C.values**2).sum(axis=1), kind="stable")
    return Ordering(perm, method)


def simulate_tree(m, seed):
    """Random bifurcating tree with Uniform(0,1) branch lengths.

    Starts from a two-tip cherry and repeatedly splits a uniformly chosen
    tip until m tips exist; all branch lengths are then drawn i.i.d.
    Uniform(0,1). Deterministic for a given seed. Tips are labeled
    s0001..s%04d in left-to-right order.
    """
    if m < 2:
        raise ValueError("need at least 2 tips")
    rng = np.random.default_rng(seed)
    parent = [-1, 0, 0]
    tips = [1, 2]
    while len(tips) < m:
        pick = int(rng.integers(len(tips)))
        node = tips[pick]
        a, b = len(parent), len(parent) + 1
        parent.extend([node, node])
        tips[pick] = a
        tips.append(b)
    parent = np.asarray(parent)
    length = np.zeros(parent.size)
    length[1:] = rng.uniform(0.0, 1.0, size=parent.size - 1)
    # Label tips s0001.. in left-to-right traversal order.
    kids = [[] for _ in range(parent.size)]
    for i, p in enumerate(parent):
        if p >= 0:
            kids[p].append(i)
    labels = [None] * parent.size
    stack, seen = [0], 0
    while stack:
        v = stack.pop()
        if not kids[v]:
            seen += 1
            labels[v] = f"s{seen:04d}"
        else:
            stack.extend(reversed(kids[v]))
    return PhyloTree(parent, length, tuple(labels))


def export_matrix_csv(values, labels, path):
    """Write a square matrix as CSV with a header row of tip labels."""
    values = np.asarray(values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(labels) + "\n")
        for row in values:
            fh.write(",".join(f"{x:.6g}" for x in row) + "\n")
