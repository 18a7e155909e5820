"""Summarise an artifact directory written by ``mvmap all``.

Usage: python demos/inspect_run.py [ARTIFACT_DIR]
"""

import sys
from pathlib import Path

from mvmap import io

root = Path(sys.argv[1] if len(sys.argv) > 1 else "artifacts")
latest = {}
for rec in io.read_manifest(root):
    latest[rec["command"]] = rec
print(f"{root}: {len(latest)} stages")
for name, rec in latest.items():
    print(f"  {name:18s} {len(rec['outputs']):5d} outputs  {rec['wall_time']:7.1f}s")
print(f"  total {sum(r['wall_time'] for r in latest.values()) / 60:.1f} min")

reports = root / "reports"
for name in ("ablation.txt", "kl_confidence.txt", "nerf_tv.csv", "scaling.csv"):
    path = reports / name
    if path.exists():
        print(f"\n{name}\n{path.read_text().rstrip()}")
