"""Array-indexed left-balanced binary tree with optional key material.

Leaves sit at even indices (leaf ``i`` is node ``2*i``), parents at odd
indices. The leaf count is always a power of two; unused trailing leaves are
blank. Only public material lives here; private keys are held by each
member's :class:`~mlstestbed.group.GroupState`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

from . import codec
from .crypto import CryptoProvider
from .messages import LeafNode, TAG_TREE

TAG_PARENT = 11


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class ParentNode:
    kem_public_key: bytes

    def encode(self) -> bytes:
        cached = self.__dict__.get("_encoded")
        if cached is None:
            cached = codec.header(TAG_PARENT).opaque(self.kem_public_key).getvalue()
            object.__setattr__(self, "_encoded", cached)
        return cached

    @classmethod
    def decode(cls, data: bytes) -> "ParentNode":
        r = codec.open_header(data, TAG_PARENT)
        node = cls(r.opaque())
        r.expect_done()
        return node


Node = Union[LeafNode, ParentNode]


# -- index arithmetic (power-of-two leaf counts) ---------------------------

def level(x: int) -> int:
    k = 0
    while (x >> k) & 1:
        k += 1
    return k


def node_width(n_leaves: int) -> int:
    return 2 * n_leaves - 1 if n_leaves else 0


def root(n_leaves: int) -> int:
    return (1 << (node_width(n_leaves).bit_length() - 1)) - 1


def left(x: int) -> int:
    k = level(x)
    if k == 0:
        raise TreeError("leaf has no children")
    return x ^ (1 << (k - 1))


def right(x: int) -> int:
    k = level(x)
    if k == 0:
        raise TreeError("leaf has no children")
    return x ^ (3 << (k - 1))


def parent(x: int, n_leaves: int) -> int:
    if x == root(n_leaves):
        raise TreeError("root has no parent")
    k = level(x)
    b = (x >> (k + 1)) & 1
    return (x | (1 << k)) ^ (b << (k + 1))


def sibling(x: int, n_leaves: int) -> int:
    p = parent(x, n_leaves)
    return right(p) if x < p else left(p)


def direct_path(x: int, n_leaves: int) -> list[int]:
    r = root(n_leaves)
    path = []
    while x != r:
        x = parent(x, n_leaves)
        path.append(x)
    return path


def copath(x: int, n_leaves: int) -> list[int]:
    r = root(n_leaves)
    out = []
    while x != r:
        out.append(sibling(x, n_leaves))
        x = parent(x, n_leaves)
    return out


def subtree_leaves(x: int) -> range:
    """Leaf indices covered by node ``x``."""
    k = level(x)
    first = (x - ((1 << k) - 1)) >> 1
    return range(first, first + (1 << k))


def common_ancestor(a_leaf: int, b_leaf: int, n_leaves: int) -> int:
    a_path = [2 * a_leaf] + direct_path(2 * a_leaf, n_leaves)
    b_nodes = set([2 * b_leaf] + direct_path(2 * b_leaf, n_leaves))
    for x in a_path:
        if x in b_nodes:
            return x
    raise TreeError("no common ancestor")


class RatchetTree:
    """Array-backed ratchet tree.

    Subtree hashes are memoised per tree; change nodes through item
    assignment, :meth:`blank` or :meth:`extend` so the memo stays valid.
    """

    def __init__(self, nodes: list[Node | None] | None = None):
        self.nodes: list[Node | None] = list(nodes) if nodes else [None]
        self._hashes: dict[int, bytes] = {}

    @classmethod
    def with_leaf(cls, leaf: LeafNode) -> "RatchetTree":
        return cls([leaf])

    @property
    def leaf_count(self) -> int:
        return (len(self.nodes) + 1) // 2

    def copy(self) -> "RatchetTree":
        t = RatchetTree(self.nodes)
        t._hashes = dict(self._hashes)
        return t

    def __eq__(self, other) -> bool:
        return isinstance(other, RatchetTree) and self.nodes == other.nodes

    def __getitem__(self, x: int) -> Node | None:
        return self.nodes[x]

    def __setitem__(self, x: int, node: Node | None) -> None:
        self.nodes[x] = node
        self._invalidate(x)

    def _invalidate(self, x: int) -> None:
        n = self.leaf_count
        top = root(n)
        while True:
            self._hashes.pop(x, None)
            if x == top:
                return
            x = parent(x, n)

    def leaf(self, i: int) -> LeafNode | None:
        return self.nodes[2 * i]

    def blank(self, x: int) -> None:
        self[x] = None

    def occupied_leaves(self) -> list[int]:
        return [i for i in range(self.leaf_count) if self.nodes[2 * i] is not None]

    def member_count(self) -> int:
        return sum(1 for i in range(0, len(self.nodes), 2) if self.nodes[i] is not None)

    def find_identity(self, identity: str) -> int | None:
        for i in range(self.leaf_count):
            leaf = self.nodes[2 * i]
            if leaf is not None and leaf.identity == identity:
                return i
        return None

    def extend(self) -> None:
        """Double the leaf count; the old tree becomes the left subtree."""
        self.nodes.extend([None] * len(self.nodes) + [None])

    def leftmost_blank_leaf(self) -> int:
        for i in range(self.leaf_count):
            if self.nodes[2 * i] is None:
                return i
        n = self.leaf_count
        self.extend()
        return n

    def direct_path(self, leaf: int) -> list[int]:
        return direct_path(2 * leaf, self.leaf_count)

    def copath(self, leaf: int) -> list[int]:
        return copath(2 * leaf, self.leaf_count)

    def resolution(self, x: int, exclude: Iterable[int] = ()) -> list[int]:
        """Minimal ordered set of non-blank nodes covering the subtree at ``x``.

        Leaves listed in ``exclude`` (leaf indices) are treated as blank.
        """
        excluded = set(exclude)
        out: list[int] = []
        stack = [x]
        while stack:
            y = stack.pop()
            if self.nodes[y] is not None and not (y % 2 == 0 and y // 2 in excluded):
                out.append(y)
            elif y % 2 == 1:
                stack.append(right(y))
                stack.append(left(y))
        return out

    def filtered_direct_path(self, leaf: int) -> list[tuple[int, int]]:
        """(parent, copath child) pairs whose copath child resolution is non-empty."""
        n = self.leaf_count
        out = []
        x = 2 * leaf
        for p in direct_path(x, n):
            c = right(p) if x < p else left(p)
            if self.resolution(c):
                out.append((p, c))
            x = p
        return out

    def public_key(self, x: int) -> bytes:
        node = self.nodes[x]
        if node is None:
            raise TreeError(f"node {x} is blank")
        return node.kem_public_key

    # -- hashing and encoding ---------------------------------------------

    def tree_hash(self, crypto: CryptoProvider) -> bytes:
        return self._hash(root(self.leaf_count), crypto)

    def _hash(self, x: int, crypto: CryptoProvider) -> bytes:
        cached = self._hashes.get(x)
        if cached is not None:
            return cached
        node = self.nodes[x]
        w = codec.Writer()
        if x % 2 == 0:
            w.u8(0).u32(x // 2).optional(node.encode() if node is not None else None)
        else:
            w.u8(1).optional(node.encode() if node is not None else None)
            w.raw(self._hash(left(x), crypto)).raw(self._hash(right(x), crypto))
        h = self._hashes[x] = crypto.hash(w.getvalue())
        return h

    def encode(self) -> bytes:
        w = codec.header(TAG_TREE).u32(len(self.nodes))
        for node in self.nodes:
            w.optional(node.encode() if node is not None else None)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "RatchetTree":
        r = codec.open_header(data, TAG_TREE)
        width = r.u32()
        n = (width + 1) // 2
        if width == 0 or n & (n - 1) or width != node_width(n):
            raise TreeError(f"invalid tree width {width}")
        nodes: list[Node | None] = []
        for x in range(width):
            raw = r.optional()
            if raw is None:
                nodes.append(None)
            elif x % 2 == 0:
                nodes.append(LeafNode.decode(raw))
            else:
                nodes.append(ParentNode.decode(raw))
        r.expect_done()
        return cls(nodes)

    def validate(self, crypto: CryptoProvider) -> None:
        """Structural checks plus a signature check on every leaf."""
        n = self.leaf_count
        if n & (n - 1) or len(self.nodes) != node_width(n):
            raise TreeError("leaf count is not a power of two")
        seen = set()
        for x, node in enumerate(self.nodes):
            if node is None:
                continue
            if x % 2 == 0:
                if not isinstance(node, LeafNode):
                    raise TreeError(f"node {x} should be a leaf")
                if node.identity in seen:
                    raise TreeError(f"duplicate identity {node.identity}")
                seen.add(node.identity)
                if not node.verify(crypto):
                    raise TreeError(f"leaf {x // 2} signature invalid")
            else:
                if not isinstance(node, ParentNode):
                    raise TreeError(f"node {x} should be a parent")
                if len(node.kem_public_key) != 32:
                    raise TreeError(f"node {x} has a malformed key")
        if not seen:
            raise TreeError("tree has no members")
