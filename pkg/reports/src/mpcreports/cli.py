"""Command line: ``mpc-report <kind> --in CSV [CSV ...] --out PATH``.

Exit codes: 0 success, 1 runtime failure, 2 schema/usage error.
"""

import argparse
import sys

from .render import KINDS, ReportJob, render
from .schemas import SchemaError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mpc-report",
        description="Render figures and tables from solver CSV outputs.",
    )
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="input CSV file(s)")
    parser.add_argument("--out", required=True, help="output image/table path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        render(ReportJob(kind=args.kind, inputs=tuple(args.inputs), out=args.out))
        return 0
    except (SchemaError, FileNotFoundError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
