#!/usr/bin/env python3
"""Write a deterministic synthetic text corpus.

Usage: python3 scripts/make_corpus.py [path] [--chars N] [--seed S]
"""

import argparse

from carope.data import write_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("path", nargs="?", default="corpus.txt")
    parser.add_argument("--chars", type=int, default=1_000_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    digest = write_corpus(args.path, args.chars, args.seed)
    print(f"wrote {args.path} ({args.chars}+ chars, seed {args.seed}, sha256 {digest[:16]})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
