"""Secure-messaging protocol lab.

X3DH and the Double Ratchet, an OTR engine, a deterministic simulated network,
policy-driven clients, and scenarios that turn client behaviour into a
property matrix.
"""

from .crypto import CryptoSuite, make_toy_suite
from .profiles import BUILTIN_PROFILES, PolicyProfile
from .scenarios import build_matrix, run_protocol_properties
from .simnet import World

__all__ = [
    "BUILTIN_PROFILES",
    "CryptoSuite",
    "PolicyProfile",
    "World",
    "build_matrix",
    "make_toy_suite",
    "run_protocol_properties",
]
__version__ = "0.1.0"
