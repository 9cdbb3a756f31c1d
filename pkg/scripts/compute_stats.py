#!/usr/bin/env python3
"""Standalone caption counter: writes the committed stats file for a manifest.

Deliberately independent of the package so the stats file can act as an
oracle for the library's own counting.
"""

import json
import sys
from collections import Counter
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main(manifest, out):
    captions = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                captions.append(json.loads(line)["caption"])
    words = Counter(len(c.split()) for c in captions)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"records {len(captions)}\n")
        fh.write(f"unique {len(set(captions))}\n")
        for k in sorted(words):
            fh.write(f"words {k} {words[k]}\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    manifest = sys.argv[1] if len(sys.argv) > 1 else ROOT / "fixtures" / "emoji" / "manifest.jsonl"
    out = sys.argv[2] if len(sys.argv) > 2 else ROOT / "fixtures" / "emoji" / "stats.txt"
    main(manifest, out)
