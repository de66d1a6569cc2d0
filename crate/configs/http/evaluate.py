"""Toy evaluator speaking the subprocess protocol.

Usage: evaluate.py --stage {prelim,full} <candidate.py>

Prints one JSON line. Replace the scoring with a real train/eval job.
"""
import argparse
import json
import sys


def body(lines, open_tag, close_tag):
    inside, out = False, []
    for line in lines:
        s = line.strip()
        if s == close_tag:
            inside = False
        if inside and s:
            out.append(s)
        if s == open_tag:
            inside = True
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--stage", choices=["prelim", "full"], required=True)
    ap.add_argument("path")
    args = ap.parse_args()
    try:
        src = open(args.path, encoding="utf-8").read()
        compile(src, args.path, "exec")
    except (OSError, SyntaxError) as e:
        print(json.dumps({"status": "error", "type": type(e).__name__}))
        return 0
    lines = src.splitlines()
    op = body(lines, "# <SPARK:OPERATOR>", "# </SPARK:OPERATOR>")
    act = body(lines, "# <SPARK:ACTION>", "# </SPARK:ACTION>")
    fitness = min(1.0, 0.1 + 0.02 * len(op) + 0.03 * len(act))
    macs = 250_000 + 4_000 * (len(op) + len(act))
    print(json.dumps({"status": "ok", "fitness": round(fitness, 4),
                      "descriptors": {"macs": macs, "params": 10 * macs}}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
