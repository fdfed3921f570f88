"""Dual-branch (text + style) cross-attention denoiser at desk scale."""
from __future__ import annotations

import hashlib
from pathlib import Path

__version__ = "0.1.0"


def code_version() -> str:
    """Package version plus a short digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"
