"""Exception hierarchy shared by every mtfs module."""


class MtfsError(Exception):
    """Base class for all mtfs errors."""


# object store / merkle
class EmptyLeafSet(MtfsError):
    pass


class ObjectTooLarge(MtfsError):
    pass


class MissingObject(MtfsError, KeyError):
    def __init__(self, object_id):
        super().__init__(object_id)
        self.object_id = object_id

    def __str__(self):
        return f"missing object {self.object_id}"


class IntegrityFailure(MtfsError):
    def __init__(self, object_id):
        super().__init__(object_id)
        self.object_id = object_id

    def __str__(self):
        return f"object {self.object_id} failed verification"


class RootMismatch(MtfsError):
    pass


class MalformedManifest(MtfsError):
    pass


# crypto
class WrongKey(MtfsError):
    pass


class CapsuleMismatch(MtfsError):
    pass


class AlreadyReencrypted(MtfsError):
    pass


class InvalidCapsule(MtfsError):
    pass


class MalformedKey(MtfsError):
    pass


# overlay
class AlreadyBootstrapped(MtfsError):
    pass


class NoOpenBranch(MtfsError):
    pass


class BranchTaken(MtfsError):
    pass


class JoinFailed(MtfsError):
    pass


class KTooSmall(MtfsError):
    pass


class InvalidGroupId(MtfsError):
    pass


# wire
class Truncated(MtfsError):
    pass


class VersionError(MtfsError):
    pass


class UnknownVariant(MtfsError):
    pass


# routing
class InvalidHex(MtfsError, ValueError):
    pass


class UnreachableNode(MtfsError):
    pass


# namespace
class MalformedFolder(MtfsError):
    pass


class DuplicateName(MtfsError):
    pass


class NameNotFound(MtfsError):
    pass


# ledger
class BadSignature(MtfsError):
    pass


class NotFound(MtfsError):
    pass


class ChainCorrupted(MtfsError):
    def __init__(self, height, reason=""):
        super().__init__(height, reason)
        self.height = height
        self.reason = reason

    def __str__(self):
        return f"chain invalid at height {self.height}: {self.reason}"


class LedgerDown(MtfsError):
    pass


# replication
class InsufficientPath(MtfsError):
    pass


class ProofTimeout(MtfsError):
    pass


class BadProof(MtfsError):
    pass


class ObjectLost(MtfsError):
    pass


# workflows
class NotAddressee(MtfsError):
    pass


# simnet / transport
class ScenarioError(MtfsError):
    pass


class ConnectionRefused(MtfsError):
    pass


class PeerClosed(MtfsError):
    pass


class MalformedFrame(MtfsError):
    pass
