"""Stand-in OCR command for CommandEngine tests: prints a file to stdout.

Flags simulate engine misbehavior (nonzero exit, hanging).
"""

import argparse
import sys
import time


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--fail", action="store_true")
    parser.add_argument("--sleep-ms", type=int, default=0)
    parser.add_argument("path")
    args = parser.parse_args()
    if args.sleep_ms:
        time.sleep(args.sleep_ms / 1000.0)
    if args.fail:
        print("simulated engine crash", file=sys.stderr)
        return 3
    with open(args.path, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


if __name__ == "__main__":
    sys.exit(main())
