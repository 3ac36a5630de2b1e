"""Python surface of the residual-stream intervention engine.

Everything public lives in the compiled module; this package just re-exports
it. When the extension has not been installed, RESID_SCOPE_BUILT_MODULE may
point at a freshly built _core binary (the in-tree test setup uses this).
"""

import importlib.util
import os
import sys

try:
    from . import _core
except ImportError:
    _path = os.environ.get("RESID_SCOPE_BUILT_MODULE")
    if not _path:
        raise
    _spec = importlib.util.spec_from_file_location(__name__ + "._core", _path)
    _core = importlib.util.module_from_spec(_spec)
    _spec.loader.exec_module(_core)
    sys.modules[__name__ + "._core"] = _core

__version__ = _core.__version__
__all__ = [name for name in dir(_core) if not name.startswith("_")]
globals().update({name: getattr(_core, name) for name in __all__})
