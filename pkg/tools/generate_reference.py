#!/usr/bin/env python3
"""Regenerate the bundled mini reference set by exhaustive enumeration.

Writes src/molrl/data/mini_reference.jsonl: every valid isomer key under
the package's valence model for the bundled bag set plus a few extra
formulas used in evaluation tests. Keys only; the enumerator produces
graphs, not geometries, so no reference energies are included.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from molrl.discovery import ReferenceSet  # noqa: E402

EXTRA_FORMULAS = ["C3H8O", "C2H5N", "C3H6"]


def main() -> None:
    data_dir = Path(__file__).resolve().parents[1] / "src" / "molrl" / "data"
    bag_lines = (data_dir / "mini_bags.txt").read_text().splitlines()
    formulas = [
        ln.split("#", 1)[0].strip() for ln in bag_lines if ln.split("#", 1)[0].strip()
    ]
    formulas += EXTRA_FORMULAS
    ref = ReferenceSet.from_enumeration(formulas)
    out = data_dir / "mini_reference.jsonl"
    ref.to_jsonl(out)
    total = sum(ref.count(f) for f in ref.formulas())
    print(f"wrote {total} reference isomers over {len(ref.formulas())} formulas -> {out}")


if __name__ == "__main__":
    main()
