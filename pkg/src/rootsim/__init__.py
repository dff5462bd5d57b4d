"""A miniature moving-GC runtime with three foreign-interface layers.

``heap`` holds the runtime and collector, ``legacy_ffi`` the value-centric
interface, ``mlroot`` the root-centric one and ``mlregion`` region-based
root management.  ``scenarios`` and ``cli`` run the binding corpus.
"""

from .errors import Diagnostic
from .heap import Runtime, RootSlot, Value, runtime_new

__all__ = ["Diagnostic", "Runtime", "RootSlot", "Value", "runtime_new"]
__version__ = "0.1.0"
