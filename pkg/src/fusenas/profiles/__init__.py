"""Bundled device profiles and the profile resolver.

`load_profile` accepts either a path to a profile JSON or a bare name
(``cpu``, ``gpu``, ``bw_rich``, ``flops_rich``). Bare names resolve against
$FUSENAS_PROFILE_DIR when set, then against the profiles bundled here.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from ..perf_model import DeviceProfile

_BUNDLED = Path(__file__).parent

PROFILE_DIR_ENV = "FUSENAS_PROFILE_DIR"


def profile_path(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        return p
    override = os.environ.get(PROFILE_DIR_ENV)
    if override:
        candidate = Path(override) / f"{name_or_path}.json"
        if candidate.exists():
            return candidate
    return _BUNDLED / f"{name_or_path}.json"


def load_profile(name_or_path: str) -> DeviceProfile:
    path = profile_path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"no device profile at {path}")
    doc = json.loads(path.read_text())
    return DeviceProfile.from_dict(doc, where=str(path))
