"""Protocol objects and their canonical encodings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from . import codec
from .crypto import CryptoProvider

TAG_LEAF = 1
TAG_KEY_PACKAGE = 2
TAG_PROPOSAL = 3
TAG_COMMIT = 4
TAG_HANDSHAKE = 5
TAG_WELCOME = 6
TAG_GROUP_INFO = 7
TAG_TREE = 8
TAG_APPLICATION = 9
TAG_GROUP_SECRETS = 10
TAG_LEAF_TBS = 20
TAG_KP_TBS = 21
TAG_GI_TBS = 22
TAG_HS_TBS = 23
TAG_CONTEXT = 24


@dataclass(frozen=True)
class LeafNode:
    identity: str
    signature_public_key: bytes
    kem_public_key: bytes
    credential: bytes
    signature: bytes = b""

    def _tbs(self) -> bytes:
        return (codec.header(TAG_LEAF_TBS).text(self.identity)
                .opaque(self.signature_public_key).opaque(self.kem_public_key)
                .opaque(self.credential).getvalue())

    @classmethod
    def create(cls, identity: str, signature_public_key: bytes, signature_private_key: bytes,
               kem_public_key: bytes, crypto: CryptoProvider) -> "LeafNode":
        unsigned = cls(identity, signature_public_key, kem_public_key, b"basic:" + identity.encode())
        sig = crypto.sign(signature_private_key, unsigned._tbs())
        return cls(identity, signature_public_key, kem_public_key, unsigned.credential, sig)

    def verify(self, crypto: CryptoProvider) -> bool:
        return crypto.verify(self.signature_public_key, self._tbs(), self.signature)

    def encode(self) -> bytes:
        # immutable, so the encoding is computed once
        cached = self.__dict__.get("_encoded")
        if cached is None:
            cached = (codec.header(TAG_LEAF).text(self.identity).opaque(self.signature_public_key)
                      .opaque(self.kem_public_key).opaque(self.credential)
                      .opaque(self.signature).getvalue())
            object.__setattr__(self, "_encoded", cached)
        return cached

    @classmethod
    def decode(cls, data: bytes) -> "LeafNode":
        r = codec.open_header(data, TAG_LEAF)
        leaf = cls(r.text(), r.opaque(), r.opaque(), r.opaque(), r.opaque())
        r.expect_done()
        return leaf


@dataclass(frozen=True)
class KeyPackage:
    leaf_node: LeafNode
    init_kem_public_key: bytes
    signature: bytes = b""

    def _tbs(self) -> bytes:
        return (codec.header(TAG_KP_TBS).opaque(self.leaf_node.encode())
                .opaque(self.init_kem_public_key).getvalue())

    def verify(self, crypto: CryptoProvider) -> bool:
        return (self.leaf_node.verify(crypto)
                and crypto.verify(self.leaf_node.signature_public_key, self._tbs(), self.signature))

    @property
    def identity(self) -> str:
        return self.leaf_node.identity

    def ref(self, crypto: CryptoProvider) -> bytes:
        return crypto.hash(self.encode())

    def encode(self) -> bytes:
        return (codec.header(TAG_KEY_PACKAGE).opaque(self.leaf_node.encode())
                .opaque(self.init_kem_public_key).opaque(self.signature).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "KeyPackage":
        r = codec.open_header(data, TAG_KEY_PACKAGE)
        kp = cls(LeafNode.decode(r.opaque()), r.opaque(), r.opaque())
        r.expect_done()
        return kp


# -- proposals ------------------------------------------------------------

@dataclass(frozen=True)
class Add:
    key_package: KeyPackage


@dataclass(frozen=True)
class Remove:
    leaf_index: int


@dataclass(frozen=True)
class Update:
    leaf_node: LeafNode


@dataclass(frozen=True)
class ExternalInit:
    kem_output: bytes


ProposalBody = Union[Add, Remove, Update, ExternalInit]
_KIND_CODE = {Add: 1, Remove: 2, Update: 3, ExternalInit: 4}


@dataclass(frozen=True)
class Proposal:
    body: ProposalBody
    proposer: int

    @property
    def kind(self) -> str:
        return type(self.body).__name__

    def encode(self) -> bytes:
        w = codec.header(TAG_PROPOSAL).u8(_KIND_CODE[type(self.body)]).u32(self.proposer)
        b = self.body
        if isinstance(b, Add):
            w.opaque(b.key_package.encode())
        elif isinstance(b, Remove):
            w.u32(b.leaf_index)
        elif isinstance(b, Update):
            w.opaque(b.leaf_node.encode())
        else:
            w.opaque(b.kem_output)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Proposal":
        r = codec.open_header(data, TAG_PROPOSAL)
        code, proposer = r.u8(), r.u32()
        body: ProposalBody
        if code == 1:
            body = Add(KeyPackage.decode(r.opaque()))
        elif code == 2:
            body = Remove(r.u32())
        elif code == 3:
            body = Update(LeafNode.decode(r.opaque()))
        elif code == 4:
            body = ExternalInit(r.opaque())
        else:
            raise codec.DecodeError(f"unknown proposal kind {code}")
        r.expect_done()
        return cls(body, proposer)

    def id(self, crypto: CryptoProvider) -> bytes:
        return crypto.hash(self.encode())


# -- commits --------------------------------------------------------------

@dataclass(frozen=True)
class HpkeCiphertext:
    enc: bytes
    ciphertext: bytes


@dataclass(frozen=True)
class UpdatePathNode:
    kem_public_key: bytes
    encrypted_path_secret: tuple[HpkeCiphertext, ...]


@dataclass(frozen=True)
class UpdatePath:
    leaf_node: LeafNode
    nodes: tuple[UpdatePathNode, ...]

    def ciphertext_count(self) -> int:
        return sum(len(n.encrypted_path_secret) for n in self.nodes)


@dataclass(frozen=True)
class Commit:
    proposals: tuple[Proposal, ...]
    path: UpdatePath | None = None

    def encode(self) -> bytes:
        w = codec.header(TAG_COMMIT).u32(len(self.proposals))
        for p in self.proposals:
            w.opaque(p.encode())
        if self.path is None:
            w.u8(0)
        else:
            w.u8(1).opaque(self.path.leaf_node.encode()).u32(len(self.path.nodes))
            for node in self.path.nodes:
                w.opaque(node.kem_public_key).u32(len(node.encrypted_path_secret))
                for ct in node.encrypted_path_secret:
                    w.opaque(ct.enc).opaque(ct.ciphertext)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Commit":
        r = codec.open_header(data, TAG_COMMIT)
        proposals = tuple(Proposal.decode(r.opaque()) for _ in range(r.u32()))
        path = None
        if r.u8():
            leaf = LeafNode.decode(r.opaque())
            nodes = []
            for _ in range(r.u32()):
                pk = r.opaque()
                cts = tuple(HpkeCiphertext(r.opaque(), r.opaque()) for _ in range(r.u32()))
                nodes.append(UpdatePathNode(pk, cts))
            path = UpdatePath(leaf, tuple(nodes))
        r.expect_done()
        return cls(proposals, path)


# -- group context and framing ----------------------------------------------

@dataclass(frozen=True)
class GroupContext:
    group_id: str
    epoch: int
    tree_hash: bytes
    confirmed_transcript_hash: bytes

    def encode(self) -> bytes:
        return (codec.header(TAG_CONTEXT).text(self.group_id).u64(self.epoch)
                .opaque(self.tree_hash).opaque(self.confirmed_transcript_hash).getvalue())

    @classmethod
    def read(cls, r: codec.Reader) -> "GroupContext":
        return cls(r.text(), r.u64(), r.opaque(), r.opaque())


SENDER_MEMBER = 1
SENDER_NEW_MEMBER = 2
CONTENT_PROPOSAL = 1
CONTENT_COMMIT = 2


@dataclass(frozen=True)
class HandshakeMessage:
    """A signed proposal or commit.

    Member-sent messages also carry a membership tag (MAC under the
    sending epoch's membership key); commits carry a confirmation tag.
    """

    group_id: str
    epoch: int
    sender_type: int
    sender: int
    content_type: int
    content: bytes
    signature: bytes = b""
    confirmation_tag: bytes | None = None
    membership_tag: bytes | None = None

    def tbs(self, context: GroupContext) -> bytes:
        return (codec.header(TAG_HS_TBS).text(self.group_id).u64(self.epoch)
                .u8(self.sender_type).u32(self.sender).u8(self.content_type)
                .opaque(self.content).opaque(context.encode()).getvalue())

    def framed_content(self) -> bytes:
        """What enters the transcript hash."""
        return (codec.Writer().text(self.group_id).u64(self.epoch).u8(self.sender_type)
                .u32(self.sender).u8(self.content_type).opaque(self.content)
                .opaque(self.signature).getvalue())

    @property
    def is_commit(self) -> bool:
        return self.content_type == CONTENT_COMMIT

    @property
    def is_external(self) -> bool:
        return self.sender_type == SENDER_NEW_MEMBER

    def proposal(self) -> Proposal:
        if self.content_type != CONTENT_PROPOSAL:
            raise ValueError("not a proposal")
        return Proposal.decode(self.content)

    def commit(self) -> Commit:
        if self.content_type != CONTENT_COMMIT:
            raise ValueError("not a commit")
        # decoded once; the message and the decoded commit are both immutable
        cached = self.__dict__.get("_commit")
        if cached is None:
            cached = Commit.decode(self.content)
            object.__setattr__(self, "_commit", cached)
        return cached

    def encode(self) -> bytes:
        return (codec.header(TAG_HANDSHAKE).text(self.group_id).u64(self.epoch)
                .u8(self.sender_type).u32(self.sender).u8(self.content_type)
                .opaque(self.content).opaque(self.signature)
                .optional(self.confirmation_tag).optional(self.membership_tag).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "HandshakeMessage":
        r = codec.open_header(data, TAG_HANDSHAKE)
        msg = cls(r.text(), r.u64(), r.u8(), r.u32(), r.u8(), r.opaque(), r.opaque(),
                  r.optional(), r.optional())
        r.expect_done()
        return msg


# -- joining ----------------------------------------------------------------

@dataclass(frozen=True)
class GroupSecrets:
    joiner_secret: bytes
    path_secret: bytes | None

    def encode(self) -> bytes:
        return codec.header(TAG_GROUP_SECRETS).opaque(self.joiner_secret).optional(self.path_secret).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "GroupSecrets":
        r = codec.open_header(data, TAG_GROUP_SECRETS)
        gs = cls(r.opaque(), r.optional())
        r.expect_done()
        return gs


@dataclass(frozen=True)
class Welcome:
    key_package_ref: bytes
    enc: bytes
    encrypted_group_secrets: bytes
    tree: bytes
    context: GroupContext
    confirmation_tag: bytes
    committer: int

    def encode(self) -> bytes:
        return (codec.header(TAG_WELCOME).opaque(self.key_package_ref).opaque(self.enc)
                .opaque(self.encrypted_group_secrets).opaque(self.tree)
                .raw(self.context.encode()[2:]).opaque(self.confirmation_tag)
                .u32(self.committer).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "Welcome":
        r = codec.open_header(data, TAG_WELCOME)
        w = cls(r.opaque(), r.opaque(), r.opaque(), r.opaque(), GroupContext.read(r),
                r.opaque(), r.u32())
        r.expect_done()
        return w


@dataclass(frozen=True)
class GroupInfo:
    context: GroupContext
    tree: bytes
    external_public_key: bytes
    confirmation_tag: bytes
    signer: int
    allow_external: bool = True
    signature: bytes = b""

    def tbs(self) -> bytes:
        return (codec.header(TAG_GI_TBS).raw(self.context.encode()).opaque(self.tree)
                .opaque(self.external_public_key).opaque(self.confirmation_tag)
                .u32(self.signer).u8(int(self.allow_external)).getvalue())

    def encode(self) -> bytes:
        return (codec.header(TAG_GROUP_INFO).raw(self.context.encode()[2:]).opaque(self.tree)
                .opaque(self.external_public_key).opaque(self.confirmation_tag)
                .u32(self.signer).u8(int(self.allow_external)).opaque(self.signature).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "GroupInfo":
        r = codec.open_header(data, TAG_GROUP_INFO)
        gi = cls(GroupContext.read(r), r.opaque(), r.opaque(), r.opaque(), r.u32(),
                 bool(r.u8()), r.opaque())
        r.expect_done()
        return gi


@dataclass(frozen=True)
class ApplicationMessage:
    group_id: str
    epoch: int
    sender: int
    generation: int
    ciphertext: bytes

    def aad(self) -> bytes:
        return (codec.Writer().text(self.group_id).u64(self.epoch).u32(self.sender)
                .u32(self.generation).getvalue())

    def encode(self) -> bytes:
        return (codec.header(TAG_APPLICATION).text(self.group_id).u64(self.epoch)
                .u32(self.sender).u32(self.generation).opaque(self.ciphertext).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "ApplicationMessage":
        r = codec.open_header(data, TAG_APPLICATION)
        m = cls(r.text(), r.u64(), r.u32(), r.u32(), r.opaque())
        r.expect_done()
        return m


def message_kind(data: bytes) -> int:
    """Object tag of an encoded top-level message, or -1 if unreadable."""
    if len(data) < 2 or data[0] != codec.FORMAT_VERSION:
        return -1
    return data[1]
