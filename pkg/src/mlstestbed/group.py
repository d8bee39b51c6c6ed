"""TreeKEM group state machine.

Operations are functions over :class:`GroupState`; every state-changing call
returns a new state and leaves its input untouched. The committer of a commit
does not process its own message: it holds a :class:`PendingCommit` and
merges it once the delivery layer confirms the commit won its epoch.

Adds blank the new leaf's direct path instead of recording unmerged leaves.
A commit carries an update path whenever it contains anything other than Add
proposals (or nothing at all); Add-only commits go without one unless
``force_path`` is set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import codec
from .crypto import (
    CryptoError,
    CryptoProvider,
    DecapError,
    KemKeyPair,
    OpenError,
    Secret,
    SignatureKeyPair,
)
from .messages import (
    CONTENT_COMMIT,
    CONTENT_PROPOSAL,
    SENDER_MEMBER,
    SENDER_NEW_MEMBER,
    Add,
    ApplicationMessage,
    Commit,
    ExternalInit,
    GroupContext,
    GroupInfo,
    GroupSecrets,
    HandshakeMessage,
    HpkeCiphertext,
    KeyPackage,
    LeafNode,
    Proposal,
    ProposalBody,
    Remove,
    Update,
    UpdatePath,
    UpdatePathNode,
    Welcome,
)
from .tree import ParentNode, RatchetTree, TreeError, common_ancestor

ZERO_SECRET = bytes(32)


class GroupError(Exception):
    pass


class WrongEpoch(GroupError):
    pass


class BadSignature(GroupError):
    pass


class BadMembershipTag(GroupError):
    pass


class BadConfirmationTag(GroupError):
    pass


class UnableToDecrypt(GroupError):
    pass


class StaleProposal(GroupError):
    pass


class EmptyGroup(GroupError):
    pass


class InvalidProposalCombination(GroupError):
    pass


class InvalidKeyPackage(GroupError):
    pass


class NoSuchMember(GroupError):
    pass


class SelfRemoveUnsupported(GroupError):
    pass


class PendingMismatch(GroupError):
    pass


class NotForMe(GroupError):
    pass


class BadTree(GroupError):
    pass


class BadGroupInfo(GroupError):
    pass


class ExternalJoinsDisabled(GroupError):
    pass


class Evicted(GroupError):
    pass


# -- key packages -----------------------------------------------------------

@dataclass
class KeyPackageSecrets:
    key_package: KeyPackage
    init_private_key: bytes
    leaf_private_key: bytes
    signature_keys: SignatureKeyPair


def new_key_package(identity: str, crypto: CryptoProvider,
                    signature_keys: SignatureKeyPair | None = None) -> tuple[KeyPackage, KeyPackageSecrets]:
    sig = signature_keys or crypto.generate_signature_keypair()
    leaf_kp = crypto.generate_kem_keypair()
    init_kp = crypto.generate_kem_keypair()
    leaf = LeafNode.create(identity, sig.public_key, sig.private_key, leaf_kp.public_key, crypto)
    unsigned = KeyPackage(leaf, init_kp.public_key)
    kp = KeyPackage(leaf, init_kp.public_key, crypto.sign(sig.private_key, unsigned._tbs()))
    return kp, KeyPackageSecrets(kp, init_kp.private_key, leaf_kp.private_key, sig)


# -- key schedule -------------------------------------------------------------

@dataclass(frozen=True)
class EpochSecrets:
    joiner_secret: Secret
    epoch_secret: Secret
    init_secret: Secret
    application_secret: Secret
    confirmation_key: Secret
    membership_key: Secret
    external_secret: Secret

    @classmethod
    def from_joiner(cls, crypto: CryptoProvider, joiner_secret: Secret, context: GroupContext) -> "EpochSecrets":
        ctx = context.encode()
        epoch = crypto.kdf_derive(joiner_secret, "epoch", ctx)
        return cls(
            joiner_secret=joiner_secret,
            epoch_secret=epoch,
            init_secret=crypto.kdf_derive(epoch, "init"),
            application_secret=crypto.kdf_derive(epoch, "application"),
            confirmation_key=crypto.kdf_derive(epoch, "confirm"),
            membership_key=crypto.kdf_derive(epoch, "membership"),
            external_secret=crypto.kdf_derive(epoch, "external"),
        )

    @classmethod
    def advance(cls, crypto: CryptoProvider, init_secret: Secret, commit_secret: Secret,
                context: GroupContext) -> "EpochSecrets":
        joiner = crypto.kdf_derive(crypto.kdf_extract(init_secret, commit_secret), "joiner", context.encode())
        return cls.from_joiner(crypto, joiner, context)


# -- state --------------------------------------------------------------------

@dataclass
class GroupState:
    group_id: str
    identity: str
    my_leaf_index: int
    tree: RatchetTree
    context: GroupContext
    secrets: EpochSecrets
    interim_transcript_hash: bytes
    confirmation_tag: bytes
    signature_keys: SignatureKeyPair
    private_keys: dict[int, bytes]
    crypto: CryptoProvider
    allow_external: bool = True
    evicted: bool = False
    app_generation: int = 0
    # fresh leaf keys of our own not-yet-committed Update proposals, by public key
    pending_leaf_keys: dict[bytes, bytes] = field(default_factory=dict)
    _external_keypair: KemKeyPair | None = field(default=None, repr=False)

    @property
    def epoch(self) -> int:
        return self.context.epoch

    @property
    def epoch_secret(self) -> Secret:
        return self.secrets.epoch_secret

    @property
    def init_secret(self) -> Secret:
        return self.secrets.init_secret

    @property
    def confirmed_transcript_hash(self) -> bytes:
        return self.context.confirmed_transcript_hash

    @property
    def external_keypair(self) -> KemKeyPair:
        if self._external_keypair is None:
            self._external_keypair = self.crypto.derive_kem_keypair(self.secrets.external_secret)
        return self._external_keypair

    @property
    def member_count(self) -> int:
        return self.tree.member_count()

    def members(self) -> list[str]:
        return [self.tree.leaf(i).identity for i in self.tree.occupied_leaves()]

    def public_state(self) -> bytes:
        return self.tree.encode() + self.context.encode()


def _context_for(state_group: str, epoch: int, tree: RatchetTree, confirmed: bytes,
                 crypto: CryptoProvider) -> GroupContext:
    return GroupContext(state_group, epoch, tree.tree_hash(crypto), confirmed)


def create_group(group_id: str, identity: str, crypto: CryptoProvider,
                 signature_keys: SignatureKeyPair | None = None,
                 allow_external: bool = True) -> GroupState:
    sig = signature_keys or crypto.generate_signature_keypair()
    leaf_kp = crypto.generate_kem_keypair()
    leaf = LeafNode.create(identity, sig.public_key, sig.private_key, leaf_kp.public_key, crypto)
    tree = RatchetTree.with_leaf(leaf)
    context = _context_for(group_id, 0, tree, b"", crypto)
    secrets = EpochSecrets.advance(crypto, crypto.random_secret(), crypto.random_secret(), context)
    tag = crypto.mac(secrets.confirmation_key, context.confirmed_transcript_hash)
    return GroupState(
        group_id=group_id, identity=identity, my_leaf_index=0, tree=tree, context=context,
        secrets=secrets, interim_transcript_hash=crypto.hash(tag), confirmation_tag=tag,
        signature_keys=sig, private_keys={0: leaf_kp.private_key}, crypto=crypto,
        allow_external=allow_external,
    )


# -- framing ------------------------------------------------------------------

def _membership_input(msg: HandshakeMessage, context: GroupContext) -> bytes:
    return (codec.Writer().opaque(msg.tbs(context)).opaque(msg.signature)
            .optional(msg.confirmation_tag).getvalue())


def _check_member_message(state: GroupState, msg: HandshakeMessage) -> LeafNode:
    """Epoch, membership tag and signature checks for a member-sent message."""
    crypto = state.crypto
    if msg.group_id != state.group_id:
        raise WrongEpoch(f"message for group {msg.group_id!r}")
    if msg.epoch != state.epoch:
        raise WrongEpoch(f"message from epoch {msg.epoch}, state at {state.epoch}")
    if msg.sender_type != SENDER_MEMBER:
        raise BadSignature("expected a member sender")
    if msg.sender >= state.tree.leaf_count or state.tree.leaf(msg.sender) is None:
        raise NoSuchMember(f"leaf {msg.sender} is not occupied")
    if msg.membership_tag is None or not crypto.mac_verify(
            state.secrets.membership_key, _membership_input(msg, state.context), msg.membership_tag):
        raise BadMembershipTag("membership tag does not verify")
    sender_leaf = state.tree.leaf(msg.sender)
    if not crypto.verify(sender_leaf.signature_public_key, msg.tbs(state.context), msg.signature):
        raise BadSignature("handshake signature does not verify")
    return sender_leaf


def make_update(state: GroupState) -> Update:
    """Fresh leaf for an Update proposal; the private key is kept on ``state``."""
    crypto = state.crypto
    kp = crypto.generate_kem_keypair()
    sig = state.signature_keys
    leaf = LeafNode.create(state.identity, sig.public_key, sig.private_key, kp.public_key, crypto)
    state.pending_leaf_keys[kp.public_key] = kp.private_key
    return Update(leaf)


def propose(state: GroupState, body: ProposalBody) -> HandshakeMessage:
    """Frame and authenticate a proposal. The group state does not change."""
    if state.evicted:
        raise Evicted("not a member")
    crypto = state.crypto
    if isinstance(body, Add):
        if not body.key_package.verify(crypto):
            raise InvalidKeyPackage("key package signature does not verify")
        if state.tree.find_identity(body.key_package.identity) is not None:
            raise InvalidKeyPackage(f"{body.key_package.identity} is already a member")
    elif isinstance(body, Remove):
        if body.leaf_index == state.my_leaf_index:
            raise SelfRemoveUnsupported("members cannot remove themselves")
        if body.leaf_index >= state.tree.leaf_count or state.tree.leaf(body.leaf_index) is None:
            raise NoSuchMember(f"leaf {body.leaf_index} is not occupied")
    elif isinstance(body, Update):
        if body.leaf_node.identity != state.identity:
            raise InvalidProposalCombination("update must keep the proposer identity")
    else:
        raise InvalidProposalCombination(f"{type(body).__name__} cannot be proposed by a member")
    proposal = Proposal(body, state.my_leaf_index)
    msg = HandshakeMessage(state.group_id, state.epoch, SENDER_MEMBER, state.my_leaf_index,
                           CONTENT_PROPOSAL, proposal.encode())
    msg = replace(msg, signature=crypto.sign(state.signature_keys.private_key, msg.tbs(state.context)))
    tag = crypto.mac(state.secrets.membership_key, _membership_input(msg, state.context))
    return replace(msg, membership_tag=tag)


def verify_proposal(state: GroupState, msg: HandshakeMessage) -> Proposal:
    """Authenticate a received proposal and check it against the current tree."""
    _check_member_message(state, msg)
    proposal = msg.proposal()
    if proposal.proposer != msg.sender:
        raise BadSignature("proposer does not match sender")
    _validate_one(state, proposal)
    return proposal


def _validate_one(state: GroupState, proposal: Proposal) -> None:
    crypto = state.crypto
    tree = state.tree
    b = proposal.body
    if isinstance(b, Add):
        if not b.key_package.verify(crypto):
            raise InvalidKeyPackage("key package signature does not verify")
    elif isinstance(b, Remove):
        if b.leaf_index >= tree.leaf_count or tree.leaf(b.leaf_index) is None:
            raise NoSuchMember(f"leaf {b.leaf_index} is not occupied")
    elif isinstance(b, Update):
        current = tree.leaf(proposal.proposer) if proposal.proposer < tree.leaf_count else None
        if current is None:
            raise NoSuchMember(f"leaf {proposal.proposer} is not occupied")
        if (b.leaf_node.identity != current.identity
                or b.leaf_node.signature_public_key != current.signature_public_key
                or not b.leaf_node.verify(crypto)):
            raise InvalidProposalCombination("update leaf does not match its member")


# -- commits ------------------------------------------------------------------

@dataclass
class _Applied:
    tree: RatchetTree
    added: list[tuple[int, KeyPackage]]
    removed: list[int]
    updated: list[int]
    external_init: bytes | None


def _apply_proposals(state: GroupState, proposals: tuple[Proposal, ...], committer: int | None,
                     known: set[bytes] | None = None) -> _Applied:
    """Validate and apply proposals to a copy of the tree (updates, removes, adds)."""
    crypto = state.crypto
    tree = state.tree.copy()
    known = known or set()
    updates: dict[int, LeafNode] = {}
    removes: list[int] = []
    adds: list[KeyPackage] = []
    external_init = None
    identities = set()
    for p in proposals:
        b = p.body
        if isinstance(b, ExternalInit):
            if committer is not None or external_init is not None:
                raise InvalidProposalCombination("ExternalInit only in external commits")
            external_init = b.kem_output
            continue
        if committer is None and not isinstance(b, Remove):
            raise InvalidProposalCombination("external commits carry only ExternalInit and a resync Remove")
        if p.id(crypto) not in known:
            _validate_one(state, p)
        if isinstance(b, Update):
            if p.proposer in updates:
                raise InvalidProposalCombination(f"two updates for leaf {p.proposer}")
            updates[p.proposer] = b.leaf_node
        elif isinstance(b, Remove):
            if b.leaf_index == committer:
                raise SelfRemoveUnsupported("committer cannot remove itself")
            if b.leaf_index in removes:
                raise InvalidProposalCombination(f"leaf {b.leaf_index} removed twice")
            removes.append(b.leaf_index)
        else:
            ident = b.key_package.identity
            if ident in identities or tree.find_identity(ident) is not None:
                raise InvalidProposalCombination(f"{ident} added twice or already a member")
            identities.add(ident)
            adds.append(b.key_package)
    if set(updates) & set(removes):
        raise InvalidProposalCombination("update and remove of the same leaf")
    if removes and committer is not None and tree.member_count() <= 1:
        raise EmptyGroup("cannot remove from a single-member group")
    for leaf, node in updates.items():
        tree[2 * leaf] = node
        for p in tree.direct_path(leaf):
            tree.blank(p)
    for leaf in removes:
        tree.blank(2 * leaf)
        for p in tree.direct_path(leaf):
            tree.blank(p)
    added = []
    for kp in adds:
        i = tree.leftmost_blank_leaf()
        tree[2 * i] = kp.leaf_node
        for p in tree.direct_path(i):
            tree.blank(p)
        added.append((i, kp))
    return _Applied(tree, added, removes, list(updates), external_init)


def _path_required(proposals: tuple[Proposal, ...]) -> bool:
    return not proposals or any(not isinstance(p.body, Add) for p in proposals)


@dataclass
class _GeneratedPath:
    leaf: LeafNode
    fdp: list[tuple[int, int]]
    path_secrets: list[Secret]
    private_keys: dict[int, bytes]
    commit_secret: Secret


def _generate_path(tree: RatchetTree, leaf_index: int, identity: str, sig: SignatureKeyPair,
                   crypto: CryptoProvider) -> _GeneratedPath:
    """Fresh leaf and path keys written into ``tree``; returns the secrets."""
    leaf_secret = crypto.random_secret()
    leaf_kp = crypto.derive_kem_keypair(leaf_secret)
    leaf = LeafNode.create(identity, sig.public_key, sig.private_key, leaf_kp.public_key, crypto)
    tree[2 * leaf_index] = leaf
    fdp = tree.filtered_direct_path(leaf_index)
    on_path = {p for p, _ in fdp}
    for p in tree.direct_path(leaf_index):
        if p not in on_path:
            tree.blank(p)
    secret = leaf_secret
    secrets = []
    keys = {2 * leaf_index: leaf_kp.private_key}
    for p, _ in fdp:
        secret = crypto.kdf_derive(secret, "path")
        kp = crypto.derive_kem_keypair(crypto.kdf_derive(secret, "node"))
        tree[p] = ParentNode(kp.public_key)
        secrets.append(secret)
        keys[p] = kp.private_key
    return _GeneratedPath(leaf, fdp, secrets, keys, crypto.kdf_derive(secret, "path"))


def _path_aad(group_id: str, epoch: int, tree_hash: bytes) -> bytes:
    return codec.Writer().text(group_id).u64(epoch).opaque(tree_hash).getvalue()


def _encrypt_path(tree: RatchetTree, gen: _GeneratedPath, exclude: list[int], aad: bytes,
                  crypto: CryptoProvider) -> UpdatePath:
    nodes = []
    for (p, c), secret in zip(gen.fdp, gen.path_secrets):
        cts = []
        for r in tree.resolution(c, exclude):
            enc, ct = crypto.hpke_seal(tree.public_key(r), b"path secret", aad, secret)
            cts.append(HpkeCiphertext(enc, ct))
        nodes.append(UpdatePathNode(tree.public_key(p), tuple(cts)))
    return UpdatePath(gen.leaf, tuple(nodes))


def _prune_private_keys(keys: dict[int, bytes], tree: RatchetTree, leaf: int) -> dict[int, bytes]:
    mine = {2 * leaf, *tree.direct_path(leaf)}
    return {x: k for x, k in keys.items() if x in mine and tree[x] is not None}


@dataclass
class PendingCommit:
    message: HandshakeMessage
    state: GroupState
    encoded: bytes
    confirmed: bool = False

    def confirm(self, echoed: bytes) -> bool:
        """Mark as winner if ``echoed`` is our own commit coming back."""
        if echoed == self.encoded:
            self.confirmed = True
        return self.confirmed


@dataclass
class CommitResult:
    message: HandshakeMessage
    welcomes: list[tuple[str, Welcome]]
    group_info: GroupInfo
    pending: PendingCommit
    path_ciphertexts: int
    proposal_count: int


def create_commit(state: GroupState, proposals=(), force_path: bool = False,
                  known: set[bytes] | None = None) -> CommitResult:
    """Build a commit applying ``proposals`` (HandshakeMessages or own Proposals)."""
    if state.evicted:
        raise Evicted("not a member")
    crypto = state.crypto
    props: list[Proposal] = []
    for item in proposals:
        if isinstance(item, HandshakeMessage):
            if item.group_id != state.group_id or item.epoch != state.epoch:
                raise StaleProposal(f"proposal from epoch {item.epoch}, state at {state.epoch}")
            props.append(item.proposal())
        elif isinstance(item, Proposal):
            props.append(item)
        else:
            props.append(Proposal(item, state.my_leaf_index))
    proposal_tuple = tuple(props)
    me = state.my_leaf_index
    applied = _apply_proposals(state, proposal_tuple, me, known)
    tree = applied.tree
    new_epoch = state.epoch + 1
    added_leaves = [i for i, _ in applied.added]

    path = None
    gen = None
    commit_secret = ZERO_SECRET
    if force_path or _path_required(proposal_tuple):
        gen = _generate_path(tree, me, state.identity, state.signature_keys, crypto)
        tree_hash = tree.tree_hash(crypto)
        path = _encrypt_path(tree, gen, added_leaves, _path_aad(state.group_id, new_epoch, tree_hash), crypto)
        commit_secret = gen.commit_secret
    else:
        tree_hash = tree.tree_hash(crypto)

    commit = Commit(proposal_tuple, path)
    msg = HandshakeMessage(state.group_id, state.epoch, SENDER_MEMBER, me, CONTENT_COMMIT, commit.encode())
    msg = replace(msg, signature=crypto.sign(state.signature_keys.private_key, msg.tbs(state.context)))
    confirmed = crypto.hash(state.interim_transcript_hash + msg.framed_content())
    context = GroupContext(state.group_id, new_epoch, tree_hash, confirmed)
    secrets = EpochSecrets.advance(crypto, state.init_secret, commit_secret, context)
    tag = crypto.mac(secrets.confirmation_key, confirmed)
    msg = replace(msg, confirmation_tag=tag)
    msg = replace(msg, membership_tag=crypto.mac(state.secrets.membership_key,
                                                  _membership_input(msg, state.context)))

    keys = dict(state.private_keys)
    if gen is not None:
        keys.update(gen.private_keys)
    new_state = replace(
        state, tree=tree, context=context, secrets=secrets,
        interim_transcript_hash=crypto.hash(confirmed + tag), confirmation_tag=tag,
        private_keys=_prune_private_keys(keys, tree, me), app_generation=0,
        pending_leaf_keys={}, _external_keypair=None,
    )

    welcomes = []
    if applied.added:
        tree_bytes = tree.encode()
        for leaf, kp in applied.added:
            path_secret = None
            if gen is not None:
                lca = common_ancestor(me, leaf, tree.leaf_count)
                idx = [p for p, _ in gen.fdp].index(lca)
                path_secret = gen.path_secrets[idx]
            ref = kp.ref(crypto)
            enc, ct = crypto.hpke_seal(kp.init_kem_public_key, b"welcome", ref,
                                       GroupSecrets(secrets.joiner_secret, path_secret).encode())
            welcomes.append((kp.identity, Welcome(ref, enc, ct, tree_bytes, context, tag, me)))

    return CommitResult(
        message=msg, welcomes=welcomes, group_info=export_group_info(new_state),
        pending=PendingCommit(msg, new_state, msg.encode()),
        path_ciphertexts=path.ciphertext_count() if path else 0,
        proposal_count=len(proposal_tuple),
    )


def merge_pending(state: GroupState, pending: PendingCommit) -> GroupState:
    if not pending.confirmed:
        raise PendingMismatch("commit was not confirmed by the delivery service")
    if pending.message.epoch != state.epoch or pending.message.group_id != state.group_id:
        raise PendingMismatch("pending commit was built from another epoch")
    return pending.state


def _decrypt_path(state: GroupState, tree: RatchetTree, committer: int, path: UpdatePath,
                  exclude: list[int], keys: dict[int, bytes], new_epoch: int) -> tuple[Secret, dict[int, bytes], bytes]:
    crypto = state.crypto
    tree[2 * committer] = path.leaf_node
    fdp = tree.filtered_direct_path(committer)
    if len(fdp) != len(path.nodes):
        raise UnableToDecrypt("update path length does not match the filtered direct path")
    resolutions = [tree.resolution(c, exclude) for _, c in fdp]
    for res, node in zip(resolutions, path.nodes):
        if len(res) != len(node.encrypted_path_secret):
            raise UnableToDecrypt("ciphertext count does not match copath resolution")
    on_path = {p for p, _ in fdp}
    for p in tree.direct_path(committer):
        if p not in on_path:
            tree.blank(p)
    for (p, _), node in zip(fdp, path.nodes):
        tree[p] = ParentNode(node.kem_public_key)
    tree_hash = tree.tree_hash(crypto)
    aad = _path_aad(state.group_id, new_epoch, tree_hash)

    start = None
    for i, res in enumerate(resolutions):
        hits = [j for j, r in enumerate(res) if r in keys]
        if hits:
            start = (i, hits[0])
            break
    if start is None:
        raise UnableToDecrypt("no ciphertext is addressed to a key we hold")
    i, j = start
    ct = path.nodes[i].encrypted_path_secret[j]
    target = resolutions[i][j]
    try:
        secret = crypto.hpke_open(keys[target], ct.enc, b"path secret", aad, ct.ciphertext)
    except CryptoError as exc:
        raise UnableToDecrypt(str(exc)) from exc
    new_keys = {}
    for k in range(i, len(fdp)):
        if k > i:
            secret = crypto.kdf_derive(secret, "path")
        kp = crypto.derive_kem_keypair(crypto.kdf_derive(secret, "node"))
        if kp.public_key != path.nodes[k].kem_public_key:
            raise UnableToDecrypt("derived path key does not match the advertised one")
        new_keys[fdp[k][0]] = kp.private_key
    return crypto.kdf_derive(secret, "path"), new_keys, tree_hash


def process_commit(state: GroupState, msg: HandshakeMessage, known: set[bytes] | None = None) -> GroupState:
    """Apply someone else's commit. Returns an evicted copy if we are removed."""
    if state.evicted:
        raise Evicted("not a member")
    crypto = state.crypto
    if not msg.is_commit:
        raise GroupError("not a commit")
    commit = msg.commit()
    external = msg.is_external
    if external:
        if msg.group_id != state.group_id or msg.epoch != state.epoch:
            raise WrongEpoch(f"external commit from epoch {msg.epoch}, state at {state.epoch}")
        if commit.path is None:
            raise GroupError("external commit without update path")
        joiner = commit.path.leaf_node
        if not crypto.verify(joiner.signature_public_key, msg.tbs(state.context), msg.signature):
            raise BadSignature("external commit signature does not verify")
        if not joiner.verify(crypto):
            raise BadSignature("joiner leaf signature does not verify")
        existing = state.tree.find_identity(joiner.identity)
        removed = [p.body.leaf_index for p in commit.proposals if isinstance(p.body, Remove)]
        if removed and removed != [existing]:
            raise InvalidProposalCombination("an external commit may only remove the joiner's old leaf")
        if existing is not None and not removed:
            raise InvalidProposalCombination(f"{joiner.identity} is already a member")
        applied = _apply_proposals(state, commit.proposals, None)
        if applied.external_init is None:
            raise InvalidProposalCombination("external commit without ExternalInit")
        committer = applied.tree.leftmost_blank_leaf()
        if committer != msg.sender:
            raise InvalidProposalCombination("external joiner claims the wrong leaf")
        try:
            init_secret = crypto.kem_decap(state.external_keypair.private_key, applied.external_init)
        except DecapError as exc:
            raise UnableToDecrypt(str(exc)) from exc
    else:
        _check_member_message(state, msg)
        committer = msg.sender
        if committer == state.my_leaf_index:
            raise PendingMismatch("own commits are merged, not processed")
        applied = _apply_proposals(state, commit.proposals, committer, known)
        init_secret = state.init_secret
        if _path_required(commit.proposals) and commit.path is None:
            raise GroupError("commit requires an update path")
        if commit.path is not None:
            leaf = commit.path.leaf_node
            old = state.tree.leaf(committer)
            if (leaf.identity != old.identity or leaf.signature_public_key != old.signature_public_key
                    or not leaf.verify(crypto)):
                raise BadSignature("committer leaf in update path is not valid")

    me = state.my_leaf_index
    if me in applied.removed:
        return replace(state, evicted=True)

    tree = applied.tree
    keys = _prune_private_keys(dict(state.private_keys), tree, me)
    if me in applied.updated:
        new_pub = tree.leaf(me).kem_public_key
        if new_pub not in state.pending_leaf_keys:
            raise UnableToDecrypt("missing private key for our own update")
        keys[2 * me] = state.pending_leaf_keys[new_pub]
    new_epoch = state.epoch + 1
    commit_secret = ZERO_SECRET
    if commit.path is not None:
        added_leaves = [i for i, _ in applied.added]
        commit_secret, path_keys, tree_hash = _decrypt_path(state, tree, committer, commit.path,
                                                            added_leaves, keys, new_epoch)
        keys.update(path_keys)
    else:
        tree_hash = tree.tree_hash(crypto)

    confirmed = crypto.hash(state.interim_transcript_hash + msg.framed_content())
    context = GroupContext(state.group_id, new_epoch, tree_hash, confirmed)
    secrets = EpochSecrets.advance(crypto, init_secret, commit_secret, context)
    if msg.confirmation_tag is None or not crypto.mac_verify(secrets.confirmation_key, confirmed,
                                                             msg.confirmation_tag):
        raise BadConfirmationTag("confirmation tag does not verify")
    return replace(
        state, tree=tree, context=context, secrets=secrets,
        interim_transcript_hash=crypto.hash(confirmed + msg.confirmation_tag),
        confirmation_tag=msg.confirmation_tag,
        private_keys=_prune_private_keys(keys, tree, me), app_generation=0,
        pending_leaf_keys={}, _external_keypair=None,
    )


# -- joining ------------------------------------------------------------------

def _load_tree(data: bytes, crypto: CryptoProvider, error=BadTree) -> RatchetTree:
    try:
        tree = RatchetTree.decode(data)
        tree.validate(crypto)
    except (TreeError, codec.DecodeError) as exc:
        raise error(str(exc)) from exc
    return tree


def process_welcome(welcome: Welcome, kp_secrets: KeyPackageSecrets, crypto: CryptoProvider,
                    allow_external: bool = True) -> GroupState:
    kp = kp_secrets.key_package
    ref = kp.ref(crypto)
    if welcome.key_package_ref != ref:
        raise NotForMe("welcome targets another key package")
    try:
        raw = crypto.hpke_open(kp_secrets.init_private_key, welcome.enc, b"welcome", ref,
                               welcome.encrypted_group_secrets)
        secrets_in = GroupSecrets.decode(raw)
    except (OpenError, codec.DecodeError) as exc:
        raise DecapError(str(exc)) from exc
    tree = _load_tree(welcome.tree, crypto)
    context = welcome.context
    if tree.tree_hash(crypto) != context.tree_hash:
        raise BadTree("tree does not match the group context")
    me = tree.find_identity(kp.identity)
    if me is None or tree.leaf(me).kem_public_key != kp.leaf_node.kem_public_key:
        raise BadTree("our leaf is not in the tree")
    secrets = EpochSecrets.from_joiner(crypto, secrets_in.joiner_secret, context)
    if not crypto.mac_verify(secrets.confirmation_key, context.confirmed_transcript_hash,
                             welcome.confirmation_tag):
        raise BadConfirmationTag("welcome confirmation tag does not verify")
    keys = {2 * me: kp_secrets.leaf_private_key}
    if secrets_in.path_secret is not None:
        if welcome.committer >= tree.leaf_count or tree.leaf(welcome.committer) is None:
            raise BadTree("committer leaf missing")
        fdp = [p for p, _ in tree.filtered_direct_path(welcome.committer)]
        lca = common_ancestor(me, welcome.committer, tree.leaf_count)
        if lca not in fdp:
            raise BadTree("common ancestor is not on the committer's path")
        secret = secrets_in.path_secret
        for k in range(fdp.index(lca), len(fdp)):
            if fdp[k] != lca:
                secret = crypto.kdf_derive(secret, "path")
            kpair = crypto.derive_kem_keypair(crypto.kdf_derive(secret, "node"))
            if tree[fdp[k]] is None or kpair.public_key != tree.public_key(fdp[k]):
                raise BadTree("path secret does not match the tree")
            keys[fdp[k]] = kpair.private_key
    return GroupState(
        group_id=context.group_id, identity=kp.identity, my_leaf_index=me, tree=tree,
        context=context, secrets=secrets,
        interim_transcript_hash=crypto.hash(context.confirmed_transcript_hash + welcome.confirmation_tag),
        confirmation_tag=welcome.confirmation_tag, signature_keys=kp_secrets.signature_keys,
        private_keys=keys, crypto=crypto, allow_external=allow_external,
    )


def export_group_info(state: GroupState) -> GroupInfo:
    crypto = state.crypto
    gi = GroupInfo(state.context, state.tree.encode(), state.external_keypair.public_key,
                   state.confirmation_tag, state.my_leaf_index, state.allow_external)
    return replace(gi, signature=crypto.sign(state.signature_keys.private_key, gi.tbs()))


def verify_group_info(gi: GroupInfo, crypto: CryptoProvider) -> RatchetTree:
    tree = _load_tree(gi.tree, crypto, BadGroupInfo)
    if tree.tree_hash(crypto) != gi.context.tree_hash:
        raise BadGroupInfo("tree does not match the group context")
    if gi.signer >= tree.leaf_count or tree.leaf(gi.signer) is None:
        raise BadGroupInfo("signer is not a member")
    if not crypto.verify(tree.leaf(gi.signer).signature_public_key, gi.tbs(), gi.signature):
        raise BadGroupInfo("group info signature does not verify")
    return tree


def external_commit(group_info: GroupInfo, identity: str, crypto: CryptoProvider,
                    signature_keys: SignatureKeyPair | None = None,
                    resync: bool = False) -> tuple[HandshakeMessage, GroupState]:
    """Join without invitation. The returned state is valid once the commit wins its epoch.

    With ``resync`` a joiner whose identity still occupies a leaf (it lost
    its state) removes that leaf in the same commit.
    """
    tree = verify_group_info(group_info, crypto)
    if not group_info.allow_external:
        raise ExternalJoinsDisabled(f"group {group_info.context.group_id} forbids external joins")
    old_leaf = tree.find_identity(identity)
    if old_leaf is not None and not resync:
        raise BadGroupInfo(f"{identity} is already a member")
    sig = signature_keys or crypto.generate_signature_keypair()
    old_ctx = group_info.context
    kem_output, init_secret = crypto.kem_encap(group_info.external_public_key)
    if old_leaf is not None:
        tree.blank(2 * old_leaf)
        for p in tree.direct_path(old_leaf):
            tree.blank(p)
    me = tree.leftmost_blank_leaf()
    gen = _generate_path(tree, me, identity, sig, crypto)
    new_epoch = old_ctx.epoch + 1
    tree_hash = tree.tree_hash(crypto)
    path = _encrypt_path(tree, gen, [], _path_aad(old_ctx.group_id, new_epoch, tree_hash), crypto)
    proposals = [Proposal(ExternalInit(kem_output), me)]
    if old_leaf is not None:
        proposals.append(Proposal(Remove(old_leaf), me))
    commit = Commit(tuple(proposals), path)
    msg = HandshakeMessage(old_ctx.group_id, old_ctx.epoch, SENDER_NEW_MEMBER, me, CONTENT_COMMIT,
                           commit.encode())
    msg = replace(msg, signature=crypto.sign(sig.private_key, msg.tbs(old_ctx)))
    interim = crypto.hash(old_ctx.confirmed_transcript_hash + group_info.confirmation_tag)
    confirmed = crypto.hash(interim + msg.framed_content())
    context = GroupContext(old_ctx.group_id, new_epoch, tree_hash, confirmed)
    secrets = EpochSecrets.advance(crypto, init_secret, gen.commit_secret, context)
    tag = crypto.mac(secrets.confirmation_key, confirmed)
    msg = replace(msg, confirmation_tag=tag)
    state = GroupState(
        group_id=old_ctx.group_id, identity=identity, my_leaf_index=me, tree=tree, context=context,
        secrets=secrets, interim_transcript_hash=crypto.hash(confirmed + tag), confirmation_tag=tag,
        signature_keys=sig, private_keys=_prune_private_keys(gen.private_keys, tree, me), crypto=crypto,
        allow_external=group_info.allow_external,
    )
    return msg, state


# -- application messages -------------------------------------------------------

def _app_key_nonce(crypto: CryptoProvider, application_secret: Secret, sender: int,
                   generation: int) -> tuple[Secret, bytes]:
    ctx = codec.Writer().u32(sender).u32(generation).getvalue()
    return (crypto.kdf_derive(application_secret, "app key", ctx),
            crypto.kdf_derive(application_secret, "app nonce", ctx)[:12])


def seal_application(state: GroupState, plaintext: bytes) -> bytes:
    if state.evicted:
        raise Evicted("not a member")
    crypto = state.crypto
    gen = state.app_generation
    state.app_generation += 1
    header = ApplicationMessage(state.group_id, state.epoch, state.my_leaf_index, gen, b"")
    sig = crypto.sign(state.signature_keys.private_key, header.aad() + plaintext)
    body = codec.Writer().opaque(plaintext).opaque(sig).getvalue()
    key, nonce = _app_key_nonce(crypto, state.secrets.application_secret, state.my_leaf_index, gen)
    return replace(header, ciphertext=crypto.aead_seal(key, nonce, header.aad(), body)).encode()


def open_application(state: GroupState, payload: bytes) -> tuple[int, bytes]:
    """Returns (sender leaf, plaintext)."""
    crypto = state.crypto
    msg = ApplicationMessage.decode(payload)
    if state.evicted:
        raise OpenError("evicted members cannot open group messages")
    if msg.group_id != state.group_id or msg.epoch != state.epoch:
        raise WrongEpoch(f"application message from epoch {msg.epoch}, state at {state.epoch}")
    if msg.sender >= state.tree.leaf_count or state.tree.leaf(msg.sender) is None:
        raise OpenError("unknown sender")
    key, nonce = _app_key_nonce(crypto, state.secrets.application_secret, msg.sender, msg.generation)
    r = codec.Reader(crypto.aead_open(key, nonce, msg.aad(), msg.ciphertext))
    plaintext, sig = r.opaque(), r.opaque()
    if not crypto.verify(state.tree.leaf(msg.sender).signature_public_key, msg.aad() + plaintext, sig):
        raise OpenError("sender signature does not verify")
    return msg.sender, plaintext
