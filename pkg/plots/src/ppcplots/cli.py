"""Script entry: figure id plus input/output paths."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import FIGURES, render
from .io import SchemaMismatch


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ppcnav-plots",
        description="Render a figure from a completed ppcnav run directory.",
    )
    parser.add_argument("figure", choices=sorted(FIGURES) + ["all"])
    parser.add_argument("--run-dir", required=True, help="directory holding manifest.txt and exp*/ outputs")
    parser.add_argument("--out", required=True,
                        help="output image path (or directory when rendering all)")
    args = parser.parse_args(argv)
    try:
        if args.figure == "all":
            out_dir = Path(args.out)
            for name in sorted(FIGURES):
                path = render(name, Path(args.run_dir), out_dir / f"{name}.png")
                print(f"rendered {name} -> {path}")
        else:
            path = render(args.figure, Path(args.run_dir), Path(args.out))
            print(f"rendered {args.figure} -> {path}")
    except SchemaMismatch as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    return 0


def console_main() -> None:
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    console_main()
