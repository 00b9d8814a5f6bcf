"""Access to the bundled reference procedure document.

The package ships an 84-action benefits-verification procedure used by the
call simulator, the training examples, and the test suite. It spans the five
call panels (authentication through wrap-up) with per-panel action counts
17/39/4/4/20 and exercises every guard feature: value equality, presence,
absence, slot-to-slot equality, prioritized branches, correction loops, and
filler interludes.
"""

from importlib.resources import as_file, files
from pathlib import Path

from nap.sop import SOPGraph, load_sop

REFERENCE_PANEL_COUNTS = {0: 17, 1: 39, 2: 4, 3: 4, 4: 20}


def reference_sop_path() -> Path:
    """Filesystem path of the bundled procedure document."""
    resource = files("nap").joinpath("data/reference_sop.json")
    with as_file(resource) as path:
        return Path(path)


def load_reference_sop() -> SOPGraph:
    """Load and validate the bundled procedure document."""
    return load_sop(reference_sop_path())
