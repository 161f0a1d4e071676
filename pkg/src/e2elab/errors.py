"""Exception hierarchy shared by every layer of the lab."""


class E2ELabError(Exception):
    pass


# crypto
class MalformedKey(E2ELabError):
    pass


class AuthenticationFailure(E2ELabError):
    pass


class ProtocolViolation(E2ELabError):
    pass


class SignatureInvalid(E2ELabError):
    pass


# x3dh
class NoSuchUser(E2ELabError):
    pass


class NoSuchPrekey(E2ELabError):
    pass


class AbortAndErase(AuthenticationFailure):
    """Responder could not decrypt the initial message; SK was discarded."""


# ratchet
class TooManySkipped(E2ELabError):
    pass


class NoMatchingKey(E2ELabError):
    pass


# otr
class AkeFailed(E2ELabError):
    pass


class NotEstablished(E2ELabError):
    pass


class ForgedUnderPublishedKey(AuthenticationFailure):
    pass


class SmpAborted(E2ELabError):
    pass


class RefusesToForgeUnpublished(E2ELabError):
    pass


# simnet
class Conflict(E2ELabError):
    pass


class PeerOffline(E2ELabError):
    pass


# session
class DuplicateUser(E2ELabError):
    pass


class InvalidProfile(E2ELabError):
    pass


class Irreversible(E2ELabError):
    pass


class AlreadyEncrypted(E2ELabError):
    pass


class SessionDead(E2ELabError):
    pass


class Unsupported(E2ELabError):
    pass


class VerificationFailed(E2ELabError):
    pass


class NotTracked(E2ELabError):
    pass
