#!/usr/bin/env python3
"""Scripted forecast process for adapter tests.

Modes: echo (last window row), scale2 (2 x last row), short (one value too few),
hang (never answers a request), nonnumeric, badhandshake, exit (quits after handshake).
"""
import argparse
import sys
import time


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--batch", type=int, default=0)
    p.add_argument("--mode", default="echo")
    a = p.parse_args()

    out = sys.stdout
    if a.mode == "badhandshake":
        out.write("HELLO\n")
        out.flush()
        time.sleep(5)
        return
    out.write(f"MODEL {a.dim} {a.window} {a.batch}\n")
    out.flush()
    if a.mode == "exit":
        return

    for line in sys.stdin:
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "PREDICT":
            sys.stderr.write(f"unexpected line: {line}")
            return
        members = int(parts[1])
        rows = [[float(v) for v in sys.stdin.readline().split()] for _ in range(members * a.window)]
        if a.mode == "hang":
            time.sleep(60)
            return
        for m in range(members):
            last = rows[(m + 1) * a.window - 1]
            if a.mode == "scale2":
                vals = [2.0 * v for v in last]
            elif a.mode == "short":
                vals = last[:-1]
            else:
                vals = last
            if a.mode == "nonnumeric":
                out.write("abc " * a.dim + "\n")
            else:
                out.write(" ".join(repr(v) for v in vals) + "\n")
        out.flush()


if __name__ == "__main__":
    main()
