"""MTFS: an encrypted, private file system over a self-organizing binary-tree overlay."""

from .crypto import KeyPair, keygen
from .ledger import Ledger
from .simnet import SimConfig, Simulator, run_script
from .workflows import UserSession

__all__ = ["KeyPair", "keygen", "Ledger", "SimConfig", "Simulator", "run_script", "UserSession"]
__version__ = "0.1.0"
