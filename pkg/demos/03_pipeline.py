"""
End-to-end on synthetic shapes
==============================

Generate a small corpus, train briefly, evaluate, and export attention maps.
This uses a short schedule so it finishes in a minute or two; the numbers
are far from converged.
"""

import json
import sys
import tempfile
from pathlib import Path

from accnn.cli import main

out = Path(tempfile.mkdtemp(prefix="accnn_demo_"))
common = ["--out", str(out), "--seed", "0", "--data.n_train=40", "--data.n_test=10"]

for argv in (["gen-data"], ["train", "--iters", "150"], ["eval"], ["attend", "--t-steps", "3"]):
    code = main(argv + common)
    if code:
        sys.exit(code)

print(json.dumps(json.loads((out / "manifest.json").read_text()), indent=1)[:600])
print("outputs in", out)
