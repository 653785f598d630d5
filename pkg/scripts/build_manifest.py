#!/usr/bin/env python3
"""Write a training/evaluation manifest for a directory of WAV files

Usage:
    python scripts/build_manifest.py data/librispeech data/manifest.tsv --corpus librispeech
    python scripts/build_manifest.py data/vctk data/manifest.tsv --corpus vctk --append

Each line is `path<TAB>split<TAB>corpus`. The split of a file depends only on its relative
path (hash buckets), so re-running over a grown directory keeps earlier assignments.
"""

import argparse
import hashlib
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from services.audio_io import MANIFEST_SPLITS  # noqa: E402


def assign_split(relative_path: str, valid_fraction: float, test_fraction: float) -> str:
    bucket = int(hashlib.sha1(relative_path.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
    if bucket < test_fraction:
        return "test"
    if bucket < test_fraction + valid_fraction:
        return "valid"
    return "train"


def build_manifest(root: Path, output: Path, corpus: str, valid_fraction: float = 0.05,
                   test_fraction: float = 0.05, append: bool = False) -> dict:
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
    counts = {split: 0 for split in MANIFEST_SPLITS}
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "a" if append else "w", encoding="utf-8") as f:
        if not append:
            f.write("# path\tsplit\tcorpus\n")
        for path in files:
            relative = path.relative_to(root).as_posix()
            split = assign_split(relative, valid_fraction, test_fraction)
            counts[split] += 1
            try:
                entry = path.resolve().relative_to(output.parent.resolve()).as_posix()
            except ValueError:
                entry = str(path.resolve())
            f.write(f"{entry}\t{split}\t{corpus}\n")
    return counts


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("root", type=Path, help="directory scanned recursively for .wav files")
    parser.add_argument("output", type=Path, help="manifest file to write")
    parser.add_argument("--corpus", default="default", help="corpus tag for the per-corpus report breakdown")
    parser.add_argument("--valid-fraction", type=float, default=0.05)
    parser.add_argument("--test-fraction", type=float, default=0.05)
    parser.add_argument("--append", action="store_true", help="append to an existing manifest")
    args = parser.parse_args()

    if not args.root.is_dir():
        print(f"Directory not found: {args.root}", file=sys.stderr)
        return 2
    counts = build_manifest(args.root, args.output, args.corpus, args.valid_fraction,
                            args.test_fraction, args.append)
    print(f"✓ {sum(counts.values())} files → {args.output} "
          + " ".join(f"{split}={n}" for split, n in counts.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
