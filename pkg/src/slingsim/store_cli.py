"""Read-only debugging CLI for the VNI database.

    vni-store dump --db PATH

Emits the non-free VNI table rows followed by the audit log, one JSON
object per line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .store import VniStore


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vni-store")
    sub = parser.add_subparsers(dest="cmd", required=True)
    dump = sub.add_parser("dump", help="emit VNI table and audit log as JSON lines")
    dump.add_argument("--db", required=True, help="path to the store file")
    args = parser.parse_args(argv)

    if args.cmd == "dump":
        if not os.path.exists(args.db):
            parser.error(f"no such store file: {args.db}")
        store = VniStore(args.db)
        try:
            for row in store.dump():
                sys.stdout.write(json.dumps(row, separators=(",", ":")) + "\n")
        finally:
            store.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
