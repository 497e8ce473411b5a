"""Finite symmetry groups acting on indexed data.

Supports plain symmetric groups, nested (two-layer) symmetric groups for
clustered data, direct products, and explicitly listed groups (e.g. graph
automorphisms supplied by the user).  Provides composition, actions on
index-aligned arrays, uniform (Haar) sampling, and coset-representative
enumeration used to collapse orbit averages into weighted sums.

Indices are 0-based throughout; 1-based indexing only ever appears at I/O
boundaries.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterator, Sequence, Union

import numpy as np

__all__ = [
    "GroupStructureError",
    "EnumerationCapError",
    "Permutation",
    "NestedElement",
    "ProductElement",
    "GroupSpec",
    "Symmetric",
    "NestedSymmetric",
    "ProductGroup",
    "Explicit",
    "TARGET_SLOT",
    "compose",
    "inverse",
    "act",
    "haar_sample",
    "coset_representatives",
    "target_source_index",
    "DEFAULT_ENUMERATION_CAP",
]

DEFAULT_ENUMERATION_CAP = 10**6


class GroupStructureError(ValueError):
    """Degree or layout mismatch between group elements / data."""


class EnumerationCapError(RuntimeError):
    """Group too large to enumerate; caller should fall back to haar_sample."""


# Sentinel label: bucket group elements by which source index they send to the
# final (target) slot.  Admits closed-form representative sets.
TARGET_SLOT = object()


# ---------------------------------------------------------------------------
# elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Permutation:
    """A permutation of {0,...,n-1}; ``mapping[i]`` is the image of i."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        n = len(self.mapping)
        seen = np.zeros(n, dtype=bool)
        for v in self.mapping:
            if not 0 <= v < n or seen[v]:
                raise GroupStructureError(f"not a bijection on 0..{n - 1}: {self.mapping}")
            seen[v] = True

    @property
    def degree(self) -> int:
        return len(self.mapping)

    @staticmethod
    def identity(n: int) -> "Permutation":
        return Permutation(tuple(range(n)))

    def is_identity(self) -> bool:
        return all(v == i for i, v in enumerate(self.mapping))

    def compose(self, other: "Permutation") -> "Permutation":
        """Function composition self∘other: (self∘other)(i) = self(other(i))."""
        if self.degree != other.degree:
            raise GroupStructureError(
                f"degree mismatch: {self.degree} vs {other.degree}"
            )
        return Permutation(tuple(self.mapping[j] for j in other.mapping))

    def inverse(self) -> "Permutation":
        inv = [0] * self.degree
        for i, v in enumerate(self.mapping):
            inv[v] = i
        return Permutation(tuple(inv))

    def __call__(self, i: int) -> int:
        return self.mapping[i]


@dataclass(frozen=True)
class NestedElement:
    """Element of a two-layer (nested) symmetric group.

    ``inner[k]`` permutes within source cluster k and ``outer`` permutes the
    clusters; the action applies the within-cluster permutations first and
    then moves cluster k to position ``outer(k)``.  As a map on (cluster,
    index) pairs: (k, j) -> (outer(k), inner[k](j)).
    """

    inner: tuple[Permutation, ...]
    outer: Permutation

    def __post_init__(self):
        if self.outer.degree != len(self.inner):
            raise GroupStructureError("outer degree must equal the number of clusters")

    @property
    def cluster_sizes(self) -> tuple[int, ...]:
        return tuple(p.degree for p in self.inner)

    @property
    def target_sizes(self) -> tuple[int, ...]:
        """Cluster sizes of the image layout (sizes permuted by outer)."""
        pi_inv = self.outer.inverse()
        sizes = self.cluster_sizes
        return tuple(sizes[pi_inv(i)] for i in range(len(sizes)))

    @property
    def degree(self) -> int:
        return sum(self.cluster_sizes)

    @staticmethod
    def identity(cluster_sizes: Sequence[int]) -> "NestedElement":
        return NestedElement(
            tuple(Permutation.identity(n) for n in cluster_sizes),
            Permutation.identity(len(cluster_sizes)),
        )

    def is_identity(self) -> bool:
        return self.outer.is_identity() and all(p.is_identity() for p in self.inner)

    def to_flat(self) -> Permutation:
        """Flatten to a permutation of the sum-of-sizes index range."""
        sizes = self.cluster_sizes
        src_off = np.concatenate([[0], np.cumsum(sizes)])
        tgt_sizes = self.target_sizes
        tgt_off = np.concatenate([[0], np.cumsum(tgt_sizes)])
        mapping = np.empty(self.degree, dtype=int)
        for k, sigma in enumerate(self.inner):
            dest = self.outer(k)
            for j in range(sizes[k]):
                mapping[src_off[k] + j] = tgt_off[dest] + sigma(j)
        return Permutation(tuple(int(v) for v in mapping))

    def compose(self, other: "NestedElement") -> "NestedElement":
        """self∘other as maps on (cluster, index) pairs."""
        if self.cluster_sizes != other.target_sizes:
            raise GroupStructureError("cluster layout mismatch in nested composition")
        eta = other.outer
        inner = tuple(
            self.inner[eta(k)].compose(tau) for k, tau in enumerate(other.inner)
        )
        return NestedElement(inner, self.outer.compose(eta))

    def inverse(self) -> "NestedElement":
        pi_inv = self.outer.inverse()
        inner = tuple(
            self.inner[pi_inv(k)].inverse() for k in range(len(self.inner))
        )
        return NestedElement(inner, pi_inv)


@dataclass(frozen=True)
class ProductElement:
    """Element of a direct product acting blockwise on concatenated data."""

    parts: tuple["GroupElement", ...]

    @property
    def degree(self) -> int:
        return sum(p.degree for p in self.parts)

    def is_identity(self) -> bool:
        return all(p.is_identity() for p in self.parts)

    def compose(self, other: "ProductElement") -> "ProductElement":
        if len(self.parts) != len(other.parts):
            raise GroupStructureError("product arity mismatch")
        return ProductElement(
            tuple(a.compose(b) for a, b in zip(self.parts, other.parts))
        )

    def inverse(self) -> "ProductElement":
        return ProductElement(tuple(p.inverse() for p in self.parts))

    def to_flat(self) -> Permutation:
        mapping: list[int] = []
        offset = 0
        for p in self.parts:
            flat = p if isinstance(p, Permutation) else p.to_flat()
            mapping.extend(offset + v for v in flat.mapping)
            offset += flat.degree
        return Permutation(tuple(mapping))


GroupElement = Union[Permutation, NestedElement, ProductElement]


# ---------------------------------------------------------------------------
# group specs
# ---------------------------------------------------------------------------


class GroupSpec:
    """Descriptor of a finite group together with its action degree."""

    @property
    def cardinality(self) -> int:  # exact big integer
        raise NotImplementedError

    @property
    def degree(self) -> int:
        raise NotImplementedError

    def identity(self) -> GroupElement:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> GroupElement:
        raise NotImplementedError

    def elements(self, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[GroupElement]:
        if self.cardinality > cap:
            raise EnumerationCapError(
                f"group of size {self.cardinality} exceeds enumeration cap {cap}; "
                "use haar_sample instead"
            )
        return self._iter_elements()

    def _iter_elements(self) -> Iterator[GroupElement]:
        raise NotImplementedError


def _random_permutation(rng: np.random.Generator, n: int) -> Permutation:
    return Permutation(tuple(int(v) for v in rng.permutation(n)))


@dataclass(frozen=True)
class Symmetric(GroupSpec):
    """All permutations of n indices."""

    n: int

    @property
    def cardinality(self) -> int:
        return math.factorial(self.n)

    @property
    def degree(self) -> int:
        return self.n

    def identity(self) -> Permutation:
        return Permutation.identity(self.n)

    def sample(self, rng: np.random.Generator) -> Permutation:
        return _random_permutation(rng, self.n)

    def _iter_elements(self) -> Iterator[Permutation]:
        for p in itertools.permutations(range(self.n)):
            yield Permutation(p)


@dataclass(frozen=True)
class NestedSymmetric(GroupSpec):
    """Within-cluster permutations combined with cluster reshuffling."""

    cluster_sizes: tuple[int, ...]

    def __post_init__(self):
        if any(n <= 0 for n in self.cluster_sizes):
            raise GroupStructureError("cluster sizes must be positive")

    @property
    def cardinality(self) -> int:
        card = math.factorial(len(self.cluster_sizes))
        for n in self.cluster_sizes:
            card *= math.factorial(n)
        return card

    @property
    def degree(self) -> int:
        return sum(self.cluster_sizes)

    def identity(self) -> NestedElement:
        return NestedElement.identity(self.cluster_sizes)

    def sample(self, rng: np.random.Generator) -> NestedElement:
        inner = tuple(_random_permutation(rng, n) for n in self.cluster_sizes)
        outer = _random_permutation(rng, len(self.cluster_sizes))
        return NestedElement(inner, outer)

    def _iter_elements(self) -> Iterator[NestedElement]:
        inner_pools = [
            [Permutation(p) for p in itertools.permutations(range(n))]
            for n in self.cluster_sizes
        ]
        outer_pool = [
            Permutation(p)
            for p in itertools.permutations(range(len(self.cluster_sizes)))
        ]
        for outer in outer_pool:
            for inner in itertools.product(*inner_pools):
                yield NestedElement(tuple(inner), outer)


@dataclass(frozen=True)
class ProductGroup(GroupSpec):
    """Direct product of group specs acting on concatenated index blocks."""

    factors: tuple[GroupSpec, ...]

    @property
    def cardinality(self) -> int:
        card = 1
        for f in self.factors:
            card *= f.cardinality
        return card

    @property
    def degree(self) -> int:
        return sum(f.degree for f in self.factors)

    def identity(self) -> ProductElement:
        return ProductElement(tuple(f.identity() for f in self.factors))

    def sample(self, rng: np.random.Generator) -> ProductElement:
        return ProductElement(tuple(f.sample(rng) for f in self.factors))

    def _iter_elements(self) -> Iterator[ProductElement]:
        pools = [list(f.elements()) for f in self.factors]
        for combo in itertools.product(*pools):
            yield ProductElement(tuple(combo))


@dataclass(frozen=True)
class Explicit(GroupSpec):
    """Explicitly listed group, e.g. graph automorphisms supplied by the user.

    The caller is responsible for closure; the property-test suite checks the
    group axioms on any Explicit spec it constructs.
    """

    members: tuple[GroupElement, ...]

    def __post_init__(self):
        if not self.members:
            raise GroupStructureError("explicit group needs at least one element")
        degrees = {m.degree for m in self.members}
        if len(degrees) != 1:
            raise GroupStructureError("explicit group elements must share a degree")

    @property
    def cardinality(self) -> int:
        return len(self.members)

    @property
    def degree(self) -> int:
        return self.members[0].degree

    def identity(self) -> GroupElement:
        for m in self.members:
            if m.is_identity():
                return m
        raise GroupStructureError("explicit group does not contain the identity")

    def sample(self, rng: np.random.Generator) -> GroupElement:
        return self.members[int(rng.integers(len(self.members)))]

    def _iter_elements(self) -> Iterator[GroupElement]:
        return iter(self.members)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """Group product g·h (apply h first, then g)."""
    if type(g) is not type(h):
        raise GroupStructureError(f"cannot compose {type(g)} with {type(h)}")
    return g.compose(h)


def inverse(g: GroupElement) -> GroupElement:
    return g.inverse()


def _flat(g: GroupElement) -> Permutation:
    return g if isinstance(g, Permutation) else g.to_flat()


def act(g: GroupElement, z: np.ndarray) -> np.ndarray:
    """Apply g to index-aligned data: coordinate i of the result is z[g^{-1}(i)].

    ``z`` is indexed along its first axis; nested/product elements act through
    their flattened permutation, so clustered data must be passed flattened in
    cluster order.
    """
    perm = _flat(g)
    z = np.asarray(z)
    if z.shape[0] != perm.degree:
        raise GroupStructureError(
            f"data length {z.shape[0]} does not match group degree {perm.degree}"
        )
    out = np.empty_like(z)
    out[np.asarray(perm.mapping)] = z
    return out


def haar_sample(
    spec: GroupSpec, rng: np.random.Generator, count: int
) -> list[GroupElement]:
    """Draw ``count`` independent uniform elements of the group."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [spec.sample(rng) for _ in range(count)]


def target_source_index(g: GroupElement) -> int:
    """Source index that g sends to the final (target) slot."""
    perm = _flat(g)
    return perm.mapping.index(perm.degree - 1)


def _closed_form_target_reps(spec: GroupSpec):
    if isinstance(spec, Symmetric):
        n = spec.n
        base = math.factorial(n - 1)
        reps = []
        for i in range(n):
            mapping = list(range(n))
            mapping[i], mapping[n - 1] = mapping[n - 1], mapping[i]
            reps.append((Permutation(tuple(mapping)), base))
        return reps
    if isinstance(spec, NestedSymmetric):
        sizes = spec.cluster_sizes
        K = len(sizes)
        reps = []
        for i in range(K):
            mult = math.factorial(K - 1) * math.factorial(sizes[i] - 1)
            for k in range(K):
                if k != i:
                    mult *= math.factorial(sizes[k])
            outer_map = list(range(K))
            outer_map[i], outer_map[K - 1] = outer_map[K - 1], outer_map[i]
            outer = Permutation(tuple(outer_map))
            for j in range(sizes[i]):
                inner = []
                for k in range(K):
                    m = list(range(sizes[k]))
                    if k == i:
                        m[j], m[sizes[i] - 1] = m[sizes[i] - 1], m[j]
                    inner.append(Permutation(tuple(m)))
                reps.append((NestedElement(tuple(inner), outer), mult))
        return reps
    return None


def coset_representatives(
    spec: GroupSpec,
    label: Union[object, Callable[[GroupElement], Hashable]],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[tuple[GroupElement, int]]:
    """One representative per distinct label with exact coset multiplicity.

    ``label`` must depend on an element only through its induced action (the
    caller's contract); pass ``TARGET_SLOT`` to bucket by the source index
    sent to the final slot, which admits closed forms for Symmetric and
    NestedSymmetric specs of any size.  Multiplicities are exact big integers
    summing to the group cardinality.
    """
    if label is TARGET_SLOT:
        closed = _closed_form_target_reps(spec)
        if closed is not None:
            return closed
        label_fn: Callable[[GroupElement], Hashable] = target_source_index
    else:
        label_fn = label  # type: ignore[assignment]

    if spec.cardinality > cap:
        raise EnumerationCapError(
            f"group of size {spec.cardinality} exceeds enumeration cap {cap} and no "
            "closed-form representative set applies; use haar_sample instead"
        )
    buckets: dict[Hashable, tuple[GroupElement, int]] = {}
    for g in spec.elements(cap):
        key = label_fn(g)
        if key in buckets:
            rep, count = buckets[key]
            buckets[key] = (rep, count + 1)
        else:
            buckets[key] = (g, 1)
    return list(buckets.values())
