"""Rooted infinitary tree of depth r, its d-regular truncations, and the
group of genealogy-preserving leaf permutations.

Vertex labels are plain tuples of positive integers; the root is ``()``.
Inside arrays a vertex at depth ``p`` of the d-truncation is addressed by
its flat row-major index ``sum((n_k - 1) * d**(p - k))``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 8

VertexLabel = tuple


class TreeDomainError(ValueError):
    """A label lies outside the tree it is being used with."""


def make_label(coords) -> VertexLabel:
    label = tuple(int(c) for c in coords)
    if len(label) > MAX_DEPTH:
        raise TreeDomainError(f"depth {len(label)} exceeds supported maximum {MAX_DEPTH}")
    if any(c < 1 for c in label):
        raise TreeDomainError(f"coordinates must be >= 1, got {label}")
    return label


def format_label(label: VertexLabel) -> str:
    """Dot-joined serialization; the root is ``*``."""
    return ".".join(str(c) for c in label) if label else "*"


def parse_label(text: str) -> VertexLabel:
    text = text.strip()
    if text == "*":
        return ()
    return make_label(int(part) for part in text.split("."))


def wedge(a: VertexLabel, b: VertexLabel) -> int:
    """Depth of the lowest common ancestor, i.e. ``|p(a) & p(b)|``."""
    k = 0
    for x, y in zip(a, b):
        if x != y:
            break
        k += 1
    return k


def path_to_root(a: VertexLabel) -> list[VertexLabel]:
    """Prefixes ``[a1, (a1, a2), ..., a]``; the root is excluded."""
    return [tuple(a[:k]) for k in range(1, len(a) + 1)]


def is_descendant(a: VertexLabel, b: VertexLabel) -> bool:
    """``a`` is ``b`` or lies below ``b``."""
    return len(a) >= len(b) and tuple(a[: len(b)]) == tuple(b)


def leaves(d: int, r: int) -> list[VertexLabel]:
    return [tuple(x) for x in itertools.product(range(1, d + 1), repeat=r)]


def label_to_index(label: VertexLabel, d: int) -> int:
    idx = 0
    for c in label:
        if not 1 <= c <= d:
            raise TreeDomainError(f"coordinate {c} outside [1, {d}]")
        idx = idx * d + (c - 1)
    return idx


def index_to_label(idx: int, d: int, depth: int) -> VertexLabel:
    coords = []
    for _ in range(depth):
        idx, rem = divmod(idx, d)
        coords.append(rem + 1)
    return tuple(reversed(coords))


def leaf_digits(d: int, r: int) -> np.ndarray:
    """``(d**r, r)`` array of 0-based coordinates of every leaf, row-major."""
    if r == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grids = np.indices((d,) * r).reshape(r, -1).T
    return grids.astype(np.int64)


def wedge_matrix(digits_a: np.ndarray, digits_b: np.ndarray) -> np.ndarray:
    """Pairwise wedge between rows of two digit arrays (vectorized)."""
    eq = digits_a[:, None, :] == digits_b[None, :, :]
    return np.cumprod(eq, axis=-1).sum(axis=-1)


def wedge_rows(digits_a: np.ndarray, digits_b: np.ndarray) -> np.ndarray:
    """Elementwise wedge of matching rows, broadcasting over leading axes."""
    eq = digits_a == digits_b
    return np.cumprod(eq, axis=-1).sum(axis=-1)


@dataclass(frozen=True)
class HierarchicalPermutation:
    """Element of the group of leaf bijections of ``[d]^r`` preserving wedges.

    ``local_maps[p]`` has shape ``(d**p, d)``; row ``j`` is the 0-based
    bijection applied to the children of the depth-``p`` vertex with flat
    index ``j``. Following the recursion ``pi(a n) = pi(a) pi_{pi(a)}(n)``,
    the map is looked up at the *image* of the parent.
    """

    d: int
    r: int
    local_maps: tuple

    def __post_init__(self):
        if len(self.local_maps) != self.r:
            raise TreeDomainError("need one layer of local maps per internal depth")
        for p, layer in enumerate(self.local_maps):
            layer = np.asarray(layer)
            if layer.shape != (self.d**p, self.d):
                raise TreeDomainError(f"local map layer {p} has shape {layer.shape}")
            if not np.all(np.sort(layer, axis=1) == np.arange(self.d)):
                raise TreeDomainError(f"local map layer {p} is not a bijection")
            layer.setflags(write=False)

    def vertex_images(self) -> list[np.ndarray]:
        """Flat images of every vertex, one array per depth ``0..r``."""
        images = [np.zeros(1, dtype=np.int64)]
        for p in range(self.r):
            parent = images[-1]
            child = parent[:, None] * self.d + self.local_maps[p][parent]
            images.append(child.reshape(-1))
        return images

    def leaf_map(self) -> np.ndarray:
        """Flat leaf index ``alpha -> pi(alpha)`` for all ``d**r`` leaves."""
        return self.vertex_images()[-1]

    def __call__(self, label: VertexLabel) -> VertexLabel:
        return apply_permutation(self, label)

    def inverse(self) -> "HierarchicalPermutation":
        images = self.vertex_images()
        layers = []
        for p in range(self.r):
            fwd = self.local_maps[p][images[p]]
            layers.append(np.argsort(fwd, axis=1))
        return HierarchicalPermutation(self.d, self.r, tuple(layers))

    def compose(self, other: "HierarchicalPermutation") -> "HierarchicalPermutation":
        """``(self o other)(a) = self(other(a))``."""
        if (self.d, self.r) != (other.d, other.r):
            raise TreeDomainError("cannot compose permutations of different trees")
        oimg = other.vertex_images()
        simg = self.vertex_images()
        layers = []
        # keyed by the composite image c(g) = s(h(g)): n -> s_{c(g)}(h_{h(g)}(n))
        for p in range(self.r):
            n_vert = self.d**p
            layer = np.empty((n_vert, self.d), dtype=np.int64)
            for g in range(n_vert):
                og = oimg[p][g]
                comp = simg[p][og]
                layer[comp] = self.local_maps[p][comp][other.local_maps[p][og]]
            layers.append(layer)
        return HierarchicalPermutation(self.d, self.r, tuple(layers))


def identity_permutation(d: int, r: int) -> HierarchicalPermutation:
    layers = tuple(np.tile(np.arange(d), (d**p, 1)) for p in range(r))
    return HierarchicalPermutation(d, r, layers)


def sample_hierarchical_permutation(d: int, r: int, rng: np.random.Generator) -> HierarchicalPermutation:
    """Uniform element: an independent Fisher-Yates shuffle at every internal vertex."""
    if d < 1 or r < 1:
        raise TreeDomainError("need d >= 1 and r >= 1")
    layers = tuple(rng.permuted(np.tile(np.arange(d), (d**p, 1)), axis=1) for p in range(r))
    return HierarchicalPermutation(d, r, layers)


def sample_leaf_maps(d: int, r: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``(size, d**r)`` leaf maps of independent uniform group elements."""
    images = np.zeros((size, 1), dtype=np.int64)
    for p in range(r):
        local = rng.permuted(np.tile(np.arange(d), (size, d**p, 1)), axis=2)
        picked = np.take_along_axis(local, images[:, :, None], axis=1)
        images = (images[:, :, None] * d + picked).reshape(size, -1)
    return images


def enumerate_hierarchical_permutations(d: int, r: int):
    """Yield every element of the group (only sensible for tiny d, r)."""
    n_internal = sum(d**p for p in range(r))
    perms = list(itertools.permutations(range(d)))
    for choice in itertools.product(perms, repeat=n_internal):
        layers, k = [], 0
        for p in range(r):
            layers.append(np.array(choice[k:k + d**p], dtype=np.int64).reshape(d**p, d))
            k += d**p
        yield HierarchicalPermutation(d, r, tuple(layers))


def apply_permutation(pi: HierarchicalPermutation, a: VertexLabel) -> VertexLabel:
    if len(a) != pi.r:
        raise TreeDomainError(f"{format_label(a)} is not a leaf of a depth-{pi.r} tree")
    image_idx = 0
    out = []
    for p, c in enumerate(a):
        if not 1 <= c <= pi.d:
            raise TreeDomainError(f"coordinate {c} outside [1, {pi.d}]")
        m = int(pi.local_maps[p][image_idx, c - 1])
        out.append(m + 1)
        image_idx = image_idx * pi.d + m
    return tuple(out)
