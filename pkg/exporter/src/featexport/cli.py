"""CLI: run an export job described by a JSON file."""
from __future__ import annotations

import argparse
import json
import sys

from .export import ExportJob, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmlf-export")
    parser.add_argument("--job", required=True, help="export job JSON path")
    args = parser.parse_args(argv)
    with open(args.job, "r", encoding="utf-8") as fh:
        job = ExportJob.from_dict(json.load(fh))
    result = export(job)
    print(
        f"wrote {result.archive_path} ({result.n_records} records), "
        f"fragment {result.fragment_path}, {result.n_skipped} item(s) skipped"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
